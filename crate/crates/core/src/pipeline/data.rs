//! Task datasets: byte-level character LM and a synthetic modular-addition
//! task. Splits are disjoint, deterministic, and calibration windows come
//! from the training split only.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SeededRng;
use crate::trainer::{Batch, BatchSampler};

/// Fraction of tokens (char LM) or examples (modular task) kept for training.
pub const TRAIN_FRACTION: f64 = 0.9;

const CALIBRATION_STREAM: u64 = 1 << 33;
const SHUFFLE_STREAM: u64 = (1 << 33) + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    CharLm { corpus: PathBuf },
    ModularArithmetic { modulus: u32, seq_len: usize },
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::CharLm {
            corpus: PathBuf::from("data/tiny_corpus.txt"),
        }
    }
}

/// Byte-to-index map. The modular task appends a pad token with no byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub symbols: Vec<u8>,
    pub pad: Option<usize>,
}

impl Vocabulary {
    /// Sorted distinct bytes of `text`.
    pub fn from_bytes(text: &[u8]) -> Vocabulary {
        let mut seen = [false; 256];
        for &b in text {
            seen[b as usize] = true;
        }
        let symbols = (0..=255u8).filter(|&b| seen[b as usize]).collect();
        Vocabulary { symbols, pad: None }
    }

    /// `0`–`9` → 0–9, `+` → 10, `=` → 11, pad → 12.
    pub fn modular() -> Vocabulary {
        Vocabulary {
            symbols: b"0123456789+=".to_vec(),
            pad: Some(12),
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len() + usize::from(self.pad.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encode(&self, text: &[u8]) -> Result<Vec<usize>> {
        let mut table = [usize::MAX; 256];
        for (i, &b) in self.symbols.iter().enumerate() {
            table[b as usize] = i;
        }
        text.iter()
            .map(|&b| match table[b as usize] {
                usize::MAX => Err(Error::InvalidConfig(format!("byte {b:#04x} is not in the vocabulary"))),
                i => Ok(i),
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter_map(|&t| self.symbols.get(t).copied())
            .map(char::from)
            .collect()
    }
}

/// A token stream cut into windows of `window` tokens whose starts are
/// multiples of `stride`. Each window yields `window − 1` inputs and the
/// same number of shifted targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSplit {
    pub tokens: Vec<usize>,
    pub window: usize,
    pub stride: usize,
}

impl TokenSplit {
    fn starts(&self) -> usize {
        if self.tokens.len() < self.window {
            0
        } else {
            (self.tokens.len() - self.window) / self.stride + 1
        }
    }

    fn window_at(&self, start: usize) -> (Vec<usize>, Vec<usize>) {
        let w = &self.tokens[start..start + self.window];
        (w[..w.len() - 1].to_vec(), w[1..].to_vec())
    }

    /// Non-overlapping windows from the start of the split, at most `limit`.
    pub fn sequential(&self, limit: usize) -> Batch {
        let mut batch = Batch {
            inputs: Vec::new(),
            targets: Vec::new(),
        };
        let step = self.window.max(self.stride);
        let mut start = 0;
        while start + self.window <= self.tokens.len() && batch.inputs.len() < limit {
            let (x, y) = self.window_at(start);
            batch.inputs.push(x);
            batch.targets.push(y);
            start += step;
        }
        batch
    }
}

impl BatchSampler for TokenSplit {
    fn sample(&mut self, batch_size: usize, rng: &mut SeededRng) -> Batch {
        let n = self.starts();
        let mut batch = Batch {
            inputs: Vec::with_capacity(batch_size),
            targets: Vec::with_capacity(batch_size),
        };
        if n == 0 {
            return batch;
        }
        for _ in 0..batch_size {
            let (x, y) = self.window_at(rng.below(n) * self.stride);
            batch.inputs.push(x);
            batch.targets.push(y);
        }
        batch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: TokenSplit,
    pub eval: TokenSplit,
    /// Input windows drawn from the training split.
    pub calibration: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn total_tokens(&self) -> usize {
        self.train.tokens.len() + self.eval.tokens.len()
    }
}

/// Tokenizes the task and builds train/eval splits plus calibration windows.
///
/// * char LM: byte vocabulary of the corpus, contiguous split at
///   `TRAIN_FRACTION`, windows of `context + 1` at any offset.
/// * modular: every `a+b=c` with `a, b < modulus` padded to `seq_len`,
///   shuffled by `seed`, split by example count.
///
/// `base_dir` resolves relative corpus paths.
pub fn ingest_corpus(
    task: &TaskSpec,
    context: usize,
    calibration_sequences: usize,
    seed: u64,
    base_dir: &Path,
) -> Result<Dataset> {
    let (vocab, train, eval) = match task {
        TaskSpec::CharLm { corpus } => {
            let path = if corpus.is_absolute() {
                corpus.clone()
            } else {
                base_dir.join(corpus)
            };
            let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if text.is_empty() {
                return Err(Error::EmptyCorpus);
            }
            let vocab = Vocabulary::from_bytes(&text);
            let tokens = vocab.encode(&text)?;
            let cut = (tokens.len() as f64 * TRAIN_FRACTION).round() as usize;
            let window = context + 1;
            if cut < window || tokens.len() - cut < window {
                return Err(Error::InvalidConfig(format!(
                    "corpus of {} bytes is too short for windows of {window}",
                    tokens.len()
                )));
            }
            let train = TokenSplit {
                tokens: tokens[..cut].to_vec(),
                window,
                stride: 1,
            };
            let eval = TokenSplit {
                tokens: tokens[cut..].to_vec(),
                window,
                stride: 1,
            };
            (vocab, train, eval)
        }
        TaskSpec::ModularArithmetic { modulus, seq_len } => {
            let vocab = Vocabulary::modular();
            if *modulus < 2 {
                return Err(Error::InvalidConfig("modulus must be at least 2".into()));
            }
            let m = *modulus as usize;
            let longest = format!("{}+{}={}", m - 1, m - 1, m - 1).len();
            if *seq_len < longest || *seq_len - 1 > context {
                return Err(Error::InvalidConfig(format!(
                    "seq_len {seq_len} must cover {longest} symbols and fit context {context} + 1"
                )));
            }
            let pad = vocab.pad.expect("modular vocab has pad");
            let mut examples = Vec::with_capacity(m * m);
            for a in 0..m {
                for b in 0..m {
                    let mut ex = vocab.encode(format!("{a}+{b}={}", (a + b) % m).as_bytes())?;
                    ex.resize(*seq_len, pad);
                    examples.push(ex);
                }
            }
            SeededRng::with_stream(seed, SHUFFLE_STREAM).shuffle(&mut examples);
            let cut = ((examples.len() as f64 * TRAIN_FRACTION).round() as usize).clamp(1, examples.len() - 1);
            let split = |xs: &[Vec<usize>]| TokenSplit {
                tokens: xs.concat(),
                window: *seq_len,
                stride: *seq_len,
            };
            (vocab, split(&examples[..cut]), split(&examples[cut..]))
        }
    };
    let mut rng = SeededRng::with_stream(seed, CALIBRATION_STREAM);
    let mut train_sampler = train.clone();
    let calibration = train_sampler.sample(calibration_sequences, &mut rng).inputs;
    Ok(Dataset {
        vocab,
        train,
        eval,
        calibration,
    })
}
