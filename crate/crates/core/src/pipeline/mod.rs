//! End-to-end experiments: ingest, pretrain a base model, calibrate, then
//! run each (regime, bit-width, seed) cell and collect an [`EvalReport`].
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! spec.json                     resolved experiment spec
//! data/vocab.json               tokenizer
//! base/params.archive           pretrained weights (+ model.json, metrics.jsonl)
//! calibration/stats.json        per-layer activation statistics
//! calibration/selection-b{b}.json  salient columns chosen for bit-width b
//! cells/{regime}-b{b}-s{seed}/  params.archive, quantized.archive,
//!                               quantized.json, metrics.jsonl, result.json,
//!                               noise_plan.json (noise regimes only)
//! report.json, report.csv       per-cell rows and aggregates
//! manifest.json                 spec hash and SHA-256 of every artifact above
//! timings.json                  wall-clock seconds (not covered by the manifest)
//! ```

pub mod data;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::DType;
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ParamSet};
use crate::noise::NoisePlan;
use crate::partition::SalientPartition;
use crate::quantizer::{quantize_layer, save_quantized, BitWidth, QuantSpec, QuantizedLayer, DEFAULT_GRID_POINTS};
use crate::sensitivity::{capture_inputs, partitions_of, select_from_stats, stats_from_inputs, ActivationStats, LayerSelection, MetricConfig};
use crate::tensor::SeededRng;
use crate::trainer::{self, evaluate, trainable_count, Batch, MetricsLog, SteScales, TrainConfig, TrainMode, TrainRun};

pub use data::{ingest_corpus, Dataset, TaskSpec, TokenSplit, Vocabulary};
pub use report::{emit_report, load_report, CellResult, CellStatus, EvalReport, Reference, ReportFormat};

const INIT_STREAM: u64 = 1 << 34;
const CELL_STREAM: u64 = 1 << 35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Quantize and evaluate, no training.
    BaselineFrozen,
    /// Noise-injected salient fine-tuning at bit `b`, then quantize at `b`.
    PreGiftsw,
    /// Quantize at `b`, then noise-injected salient fine-tuning with the
    /// post-noise bit-width.
    PostGiftsw,
    /// Quantize at `b`, then salient fine-tuning without noise.
    SalientFtPost,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::BaselineFrozen,
        Regime::PreGiftsw,
        Regime::PostGiftsw,
        Regime::SalientFtPost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::BaselineFrozen => "baseline_frozen",
            Regime::PreGiftsw => "pre_giftsw",
            Regime::PostGiftsw => "post_giftsw",
            Regime::SalientFtPost => "salient_ft_post",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown regime {s:?}")))
    }
}

/// Everything an experiment needs. `seed` is the master seed: it fixes the
/// data split, calibration windows, base-model init and pretraining, and
/// each listed fine-tuning seed is mixed with it to derive the cell seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub metric: MetricConfig,
    pub k: usize,
    pub bits: Vec<BitWidth>,
    pub regimes: Vec<Regime>,
    /// Base-model training (always full-parameter; `mode` is ignored).
    pub pretrain: TrainConfig,
    /// Fine-tuning in the regimes (`mode` is set per regime).
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Noise level of the post-quantization regimes.
    pub post_noise_bits: BitWidth,
    pub grid_points: usize,
    pub calibration_sequences: usize,
    pub eval_sequences: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskSpec::CharLm {
                corpus: PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/data/tiny_corpus.txt")),
            },
            model: ModelConfig::tiny(0),
            metric: MetricConfig::default(),
            k: 4,
            bits: [2, 3, 4, 8].map(|b| BitWidth::new(b).unwrap()).to_vec(),
            regimes: Regime::ALL.to_vec(),
            pretrain: TrainConfig {
                mode: TrainMode::FullFt,
                steps: 1500,
                peak_lr: 1e-2,
                eval_every: 250,
                ..TrainConfig::default()
            },
            train: TrainConfig {
                mode: TrainMode::Giftsw,
                steps: 300,
                peak_lr: 1e-2,
                eval_every: 50,
                ..TrainConfig::default()
            },
            seeds: (0..5).collect(),
            post_noise_bits: BitWidth::new(4).unwrap(),
            grid_points: DEFAULT_GRID_POINTS,
            calibration_sequences: 64,
            eval_sequences: 128,
        }
    }
}

impl ExperimentSpec {
    /// Reads a JSON spec; relative corpus paths are resolved against the
    /// spec file's directory.
    pub fn load(path: &Path) -> Result<ExperimentSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: ExperimentSpec = serde_json::from_str(&text)?;
        if let TaskSpec::CharLm { corpus } = &mut spec.task {
            if corpus.is_relative() {
                let dir = path.parent().unwrap_or(Path::new("."));
                *corpus = dir.join(&*corpus);
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must not be empty".into()));
        }
        if self.bits.is_empty() {
            return Err(Error::InvalidConfig("bits must not be empty".into()));
        }
        if self.regimes.is_empty() {
            return Err(Error::InvalidConfig("regimes must not be empty".into()));
        }
        if self.grid_points < 2 {
            return Err(Error::InvalidConfig("grid_points must be at least 2".into()));
        }
        if self.calibration_sequences == 0 || self.eval_sequences == 0 {
            return Err(Error::InvalidConfig("calibration and eval sequence counts must be positive".into()));
        }
        self.pretrain.validate()?;
        self.train.validate()
    }

    /// Model shape with the vocabulary filled in from the tokenizer.
    pub fn model_config(&self, vocab: &Vocabulary) -> Result<ModelConfig> {
        let mut cfg = self.model.clone();
        if cfg.vocab_size == 0 {
            cfg.vocab_size = vocab.len();
        } else if cfg.vocab_size < vocab.len() {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} is smaller than the tokenizer's {}",
                cfg.vocab_size,
                vocab.len()
            )));
        }
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(hex_sha256(serde_json::to_string(self)?.as_bytes()))
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Training seed of the cells that share listed seed `seed`.
pub fn cell_seed(master: u64, seed: u64) -> u64 {
    SeededRng::with_stream(master, CELL_STREAM.wrapping_add(seed)).next_u64()
}

/// Data, base model and calibration statistics shared by all cells.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub eval_batch: Batch,
    pub base: ParamSet,
    pub pretrain_log: MetricsLog,
    pub stats: BTreeMap<String, ActivationStats>,
    pub reference: Reference,
}

pub fn ingest(spec: &ExperimentSpec) -> Result<Dataset> {
    ingest_corpus(
        &spec.task,
        spec.model.context_length,
        spec.calibration_sequences,
        spec.seed,
        Path::new("."),
    )
}

/// Full-parameter training of a freshly initialized model.
pub fn pretrain(spec: &ExperimentSpec, dataset: &Dataset, eval: &Batch) -> Result<(ParamSet, MetricsLog)> {
    let cfg = spec.model_config(&dataset.vocab)?;
    let init = init_params(&cfg, &mut SeededRng::with_stream(spec.seed, INIT_STREAM))?;
    let train_cfg = TrainConfig {
        mode: TrainMode::FullFt,
        seed: spec.seed,
        ..spec.pretrain.clone()
    };
    let mut sampler = dataset.train.clone();
    trainer::train(
        init,
        TrainRun {
            cfg: &train_cfg,
            partitions: &BTreeMap::new(),
            plan: None,
            ste: None,
            sampler: &mut sampler,
            eval: Some(eval),
        },
    )
}

/// Activation statistics of every eligible layer on the calibration windows.
pub fn calibration_stats(params: &ParamSet, dataset: &Dataset) -> Result<BTreeMap<String, ActivationStats>> {
    stats_from_inputs(&capture_inputs(params, &dataset.calibration)?)
}

pub fn prepare_with_base(spec: &ExperimentSpec, dataset: Dataset, base: ParamSet, pretrain_log: MetricsLog) -> Result<Prepared> {
    let eval_batch = dataset.eval.sequential(spec.eval_sequences);
    let rec = evaluate(&base, &eval_batch)?;
    let stats = calibration_stats(&base, &dataset)?;
    Ok(Prepared {
        dataset,
        eval_batch,
        base,
        pretrain_log,
        stats,
        reference: Reference {
            eval_loss: rec.eval_loss,
            eval_accuracy: rec.eval_accuracy,
        },
    })
}

pub fn prepare(spec: &ExperimentSpec) -> Result<Prepared> {
    spec.validate()?;
    let dataset = ingest(spec)?;
    let eval_batch = dataset.eval.sequential(spec.eval_sequences);
    let (base, log) = pretrain(spec, &dataset, &eval_batch)?;
    prepare_with_base(spec, dataset, base, log)
}

/// Salient columns for quantization at `bits`; the metric's perturbation is
/// the quantization error at that bit-width.
pub fn select_for_bits(
    spec: &ExperimentSpec,
    params: &ParamSet,
    stats: &BTreeMap<String, ActivationStats>,
    bits: BitWidth,
) -> Result<BTreeMap<String, LayerSelection>> {
    let qspec = QuantSpec::new(bits).with_grid_points(spec.grid_points);
    select_from_stats(params, stats, &spec.metric, spec.k, Some(&qspec))
}

/// Quantizes the non-salient columns of every eligible tensor. Returns the
/// dequantized model alongside the per-layer integer payloads.
pub fn quantize_model(
    params: &ParamSet,
    partitions: &BTreeMap<String, SalientPartition>,
    spec: &QuantSpec,
) -> Result<(ParamSet, BTreeMap<String, QuantizedLayer>)> {
    let mut out = params.clone();
    let mut layers = BTreeMap::new();
    for name in params.eligible_names() {
        let partition = partitions
            .get(&name)
            .ok_or_else(|| Error::MissingPartition(name.clone()))?;
        let layer = quantize_layer(params.get(&name)?, partition, spec)?;
        out.set(&name, layer.reconstruct()?)?;
        layers.insert(name, layer);
    }
    Ok((out, layers))
}

#[derive(Debug, Clone)]
pub struct FineTuned {
    pub params: ParamSet,
    pub log: MetricsLog,
    pub plan: Option<NoisePlan>,
}

/// Fine-tunes `params` in `mode`. Noise modes build their plan, and STE its
/// fixed step sizes, from the starting weights at `noise_bits`.
pub fn finetune(
    spec: &ExperimentSpec,
    prepared: &Prepared,
    params: ParamSet,
    partitions: &BTreeMap<String, SalientPartition>,
    mode: TrainMode,
    noise_bits: BitWidth,
    seed: u64,
) -> Result<FineTuned> {
    let cfg = TrainConfig {
        mode,
        seed,
        noise_bits,
        ..spec.train.clone()
    };
    let plan = if mode.injects_noise() {
        Some(NoisePlan::build(&params, partitions, noise_bits, spec.grid_points)?)
    } else {
        None
    };
    let ste = if mode == TrainMode::Ste {
        let qspec = QuantSpec::new(noise_bits).with_grid_points(spec.grid_points);
        Some(SteScales::build(&params, partitions, &qspec)?)
    } else {
        None
    };
    let mut sampler = prepared.dataset.train.clone();
    let (params, log) = trainer::train(
        params,
        TrainRun {
            cfg: &cfg,
            partitions,
            plan: plan.as_ref(),
            ste: ste.as_ref(),
            sampler: &mut sampler,
            eval: Some(&prepared.eval_batch),
        },
    )?;
    Ok(FineTuned { params, log, plan })
}

/// Final state of one (regime, bits, seed) cell.
#[derive(Debug, Clone)]
pub struct CellOutput {
    pub result: CellResult,
    /// Dequantized model that was evaluated.
    pub params: ParamSet,
    pub layers: BTreeMap<String, QuantizedLayer>,
    pub log: MetricsLog,
    pub plan: Option<NoisePlan>,
}

pub fn run_regime(
    spec: &ExperimentSpec,
    prepared: &Prepared,
    partitions: &BTreeMap<String, SalientPartition>,
    regime: Regime,
    bits: BitWidth,
    seed: u64,
) -> Result<CellOutput> {
    let qspec = QuantSpec::new(bits).with_grid_points(spec.grid_points);
    let run_seed = cell_seed(spec.seed, seed);
    let (params, layers, log, plan, mode) = match regime {
        Regime::BaselineFrozen => {
            let (q, layers) = quantize_model(&prepared.base, partitions, &qspec)?;
            (q, layers, MetricsLog::default(), None, None)
        }
        Regime::PreGiftsw => {
            let ft = finetune(spec, prepared, prepared.base.clone(), partitions, TrainMode::Giftsw, bits, run_seed)?;
            let (q, layers) = quantize_model(&ft.params, partitions, &qspec)?;
            (q, layers, ft.log, ft.plan, Some(TrainMode::Giftsw))
        }
        Regime::PostGiftsw | Regime::SalientFtPost => {
            let mode = if regime == Regime::PostGiftsw {
                TrainMode::Giftsw
            } else {
                TrainMode::SalientFt
            };
            let (q, layers) = quantize_model(&prepared.base, partitions, &qspec)?;
            let ft = finetune(spec, prepared, q.clone(), partitions, mode, spec.post_noise_bits, run_seed)?;
            let mut tuned = BTreeMap::new();
            let mut out = ft.params.clone();
            for (name, layer) in &layers {
                let trained = ft.params.get(name)?;
                let updated = layer.with_salient(trained)?;
                let w = updated.reconstruct()?;
                // frozen columns must still be exactly the dequantized codes
                if w.to_le_bytes() != trained.to_le_bytes() {
                    return Err(Error::InvalidConfig(format!("frozen columns of {name} moved during fine-tuning")));
                }
                out.set(name, w)?;
                tuned.insert(name.clone(), updated);
            }
            (out, tuned, ft.log, ft.plan, Some(mode))
        }
    };
    let rec = evaluate(&params, &prepared.eval_batch)?;
    let trainable = mode.map_or(0, |m| trainable_count(&params, partitions, m));
    Ok(CellOutput {
        result: CellResult {
            regime,
            bits: bits.bits(),
            seed,
            status: CellStatus::Ok,
            eval_loss: Some(rec.eval_loss),
            eval_accuracy: Some(rec.eval_accuracy),
            trainable_param_count: trainable,
            reason: None,
        },
        params,
        layers,
        log,
        plan,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, s)
}

/// Writes the shared artifacts: spec, vocabulary, base model, statistics.
pub fn write_prepared(spec: &ExperimentSpec, prepared: &Prepared, out_dir: &Path) -> Result<()> {
    write(&out_dir.join("spec.json"), spec.to_json()?)?;
    write_json(&out_dir.join("data/vocab.json"), &prepared.dataset.vocab)?;
    let base = out_dir.join("base");
    std::fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
    prepared.base.save(&base)?;
    prepared.pretrain_log.write_jsonl(&base.join("metrics.jsonl"))?;
    write_json(&out_dir.join("calibration/stats.json"), &prepared.stats)
}

pub fn write_cell(cell: &CellOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cell.params.to_archive(DType::F64).save(&dir.join("params.archive"))?;
    save_quantized(&cell.layers, &dir.join("quantized.archive"), &dir.join("quantized.json"))?;
    cell.log.write_jsonl(&dir.join("metrics.jsonl"))?;
    write_json(&dir.join("result.json"), &cell.result)?;
    if let Some(plan) = &cell.plan {
        write_json(&dir.join("noise_plan.json"), &plan.manifest_entry())?;
    }
    Ok(())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("inside root").to_path_buf());
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub crate_version: String,
    pub spec_sha256: String,
    /// Relative path → SHA-256 of the file contents.
    pub artifacts: BTreeMap<String, String>,
}

/// Hashes every file under `out_dir` except the manifest and timings.
pub fn write_manifest(spec: &ExperimentSpec, out_dir: &Path) -> Result<Manifest> {
    let mut files = Vec::new();
    collect_files(out_dir, out_dir, &mut files)?;
    let mut artifacts = BTreeMap::new();
    for rel in files {
        let key = rel.to_string_lossy().replace('\\', "/");
        if key == "manifest.json" || key == "timings.json" {
            continue;
        }
        let path = out_dir.join(&rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        artifacts.insert(key, hex_sha256(&bytes));
    }
    let manifest = Manifest {
        schema_version: report::SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        spec_sha256: spec.sha256()?,
        artifacts,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub prepare_seconds: f64,
    pub cells: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub report: EvalReport,
    pub timings: Timings,
    pub prepared: Prepared,
}

/// Runs every configured (regime, bits, seed) cell. Cells run in parallel;
/// a failing cell is recorded with its reason and the sweep continues.
/// With `out_dir`, every artifact of the layout above is written.
pub fn sweep(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<SweepOutcome> {
    let started = Instant::now();
    let prepared = prepare(spec)?;
    let prepare_seconds = started.elapsed().as_secs_f64();
    tracing::info!(
        eval_loss = prepared.reference.eval_loss,
        seconds = prepare_seconds,
        "base model ready"
    );
    if let Some(dir) = out_dir {
        write_prepared(spec, &prepared, dir)?;
    }

    let mut partitions_by_bits = BTreeMap::new();
    for &bits in &spec.bits {
        let selection = select_for_bits(spec, &prepared.base, &prepared.stats, bits)?;
        if let Some(dir) = out_dir {
            write_json(&dir.join(format!("calibration/selection-b{}.json", bits.bits())), &selection)?;
        }
        partitions_by_bits.insert(bits.bits(), partitions_of(&selection)?);
    }

    let mut jobs = Vec::new();
    for &regime in &spec.regimes {
        for &bits in &spec.bits {
            for &seed in &spec.seeds {
                jobs.push((regime, bits, seed));
            }
        }
    }
    let finished: Vec<(CellResult, f64)> = jobs
        .par_iter()
        .map(|&(regime, bits, seed)| {
            let t0 = Instant::now();
            let outcome = run_regime(spec, &prepared, &partitions_by_bits[&bits.bits()], regime, bits, seed)
                .and_then(|cell| {
                    if let Some(dir) = out_dir {
                        write_cell(&cell, &dir.join("cells").join(cell.result.id()))?;
                    }
                    Ok(cell.result)
                });
            let result = outcome.unwrap_or_else(|e| {
                tracing::warn!(regime = regime.name(), bits = bits.bits(), seed, error = %e, "cell failed");
                CellResult::failed(regime, bits.bits(), seed, e.to_string())
            });
            tracing::info!(cell = %result.id(), loss = ?result.eval_loss, "cell done");
            (result, t0.elapsed().as_secs_f64())
        })
        .collect();

    let mut timings = Timings {
        prepare_seconds,
        cells: BTreeMap::new(),
    };
    let mut cells = Vec::with_capacity(finished.len());
    for (result, secs) in finished {
        timings.cells.insert(result.id(), secs);
        cells.push(result);
    }
    let report = EvalReport::new(Some(prepared.reference.clone()), cells);
    if let Some(dir) = out_dir {
        emit_report(&report, ReportFormat::Json, &dir.join("report.json"))?;
        emit_report(&report, ReportFormat::Csv, &dir.join("report.csv"))?;
        write_manifest(spec, dir)?;
        write_json(&dir.join("timings.json"), &timings)?;
    }
    Ok(SweepOutcome {
        report,
        timings,
        prepared,
    })
}
