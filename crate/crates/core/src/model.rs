//! A tiny decoder-only transformer with a hand-written backward pass.
//!
//! Per block (pre-norm, single head, no biases, no dropout):
//!
//! ```text
//! a   = rmsnorm(x) * g_attn
//! q,k,v = Wq a, Wk a, Wv a
//! ctx = causal_softmax(q kᵀ / sqrt(d)) v
//! y   = x + Wo ctx
//! m   = rmsnorm(y) * g_mlp
//! x'  = y + Wdown silu(Wup m)
//! ```
//!
//! followed by a final RMS norm and an untied output head. Weight matrices
//! are stored `[out, in]`, so the columns GIFT-SW partitions are input
//! channels. Every projection (`attn.{q,k,v,o}`, `mlp.{up,down}`, `head`) is
//! eligible for partitioning; embeddings and norm gains are not.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{DType, TensorArchive};
use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

const RMS_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// 0 in experiment specs means "take it from the tokenizer".
    #[serde(default)]
    pub vocab_size: usize,
    pub context_length: usize,
    pub d_model: usize,
    pub n_layers: usize,
    #[serde(default = "one")]
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of the Gaussian init before per-tensor scaling.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn one() -> usize {
    1
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// Desk-scale default: 1 layer, width 32, context 32.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_length: 32,
            d_model: 32,
            n_layers: 1,
            n_heads: 1,
            d_ff: 128,
            seed: 0,
            init_std: default_init_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("context_length", self.context_length),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.n_heads != 1 {
            return Err(Error::InvalidConfig("only single-head attention is supported".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig("d_model must be divisible by n_heads".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidConfig("init_std must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, c, d, f, l) = (
            self.vocab_size,
            self.context_length,
            self.d_model,
            self.d_ff,
            self.n_layers,
        );
        v * d + c * d + l * (4 * d * d + 2 * d * f + 2 * d) + d + v * d
    }

    /// Every tensor name with its shape, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, c, d, f) = (self.vocab_size, self.context_length, self.d_model, self.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![c, d]),
        ];
        for l in 0..self.n_layers {
            let p = format!("blocks.{l}");
            out.push((format!("{p}.norm_attn"), vec![d]));
            for w in ["q", "k", "v", "o"] {
                out.push((format!("{p}.attn.{w}"), vec![d, d]));
            }
            out.push((format!("{p}.norm_mlp"), vec![d]));
            out.push((format!("{p}.mlp.up"), vec![f, d]));
            out.push((format!("{p}.mlp.down"), vec![d, f]));
        }
        out.push(("norm_final".to_string(), vec![d]));
        out.push(("head".to_string(), vec![v, d]));
        out.sort();
        out
    }
}

/// Whether GIFT-SW may partition this tensor (2-D projections only).
pub fn is_eligible(name: &str) -> bool {
    name == "head"
        || [".attn.q", ".attn.k", ".attn.v", ".attn.o", ".mlp.up", ".mlp.down"]
            .iter()
            .any(|s| name.ends_with(s))
}

/// Named parameter tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

pub fn init_params(config: &ModelConfig, rng: &mut SeededRng) -> Result<ParamSet> {
    config.validate()?;
    let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.tensor_shapes() {
        let tensor = if shape.len() == 1 {
            Tensor::filled(&shape, 1.0)
        } else {
            let scale = if name.ends_with(".attn.o") || name.ends_with(".mlp.down") {
                residual_scale
            } else {
                1.0
            };
            let std = config.init_std * scale;
            let numel: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..numel).map(|_| std * rng.gaussian()).collect())?
        };
        tensors.insert(name, tensor);
    }
    Ok(ParamSet {
        config: config.clone(),
        tensors,
    })
}

impl ParamSet {
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape(slot.shape(), tensor.shape()));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, t)| (k.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, t)| (k.as_str(), t))
    }

    /// Eligible tensor names in sorted order.
    pub fn eligible_names(&self) -> Vec<String> {
        self.tensors.keys().filter(|n| is_eligible(n)).cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn to_archive(&self, dtype: DType) -> TensorArchive {
        let mut archive = TensorArchive::new();
        for (name, t) in &self.tensors {
            archive.insert(name.clone(), dtype, t.clone());
        }
        archive
    }

    pub fn from_archive(config: &ModelConfig, archive: TensorArchive) -> Result<ParamSet> {
        config.validate()?;
        let mut tensors = archive.into_tensors();
        let mut out = BTreeMap::new();
        for (name, shape) in config.tensor_shapes() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::UnknownTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(&shape, t.shape()));
            }
            out.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Archive(format!("unexpected tensor `{extra}`")));
        }
        Ok(ParamSet {
            config: config.clone(),
            tensors: out,
        })
    }

    /// Writes `<dir>/params.archive` and `<dir>/model.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.to_archive(DType::F64).save(dir.join("params.archive"))?;
        let cfg = serde_json::to_vec_pretty(&self.config)?;
        let path = dir.join("model.json");
        std::fs::write(&path, cfg).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<ParamSet> {
        let path = dir.join("model.json");
        let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let config: ModelConfig = serde_json::from_slice(&raw)?;
        ParamSet::from_archive(&config, TensorArchive::load(dir.join("params.archive"))?)
    }
}

// ---------------------------------------------------------------------------
// dense helpers; matrices are [out, in]

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// out += Wᵀ dy
fn matvec_t_acc(w: &Tensor, dy: &[f64], out: &mut [f64]) {
    for (i, &g) in dy.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += wij * g;
        }
    }
}

/// grad += dy ⊗ x
fn outer_acc(grad: &mut Tensor, dy: &[f64], x: &[f64]) {
    for (i, &g) in dy.iter().enumerate() {
        for (o, &xj) in grad.row_mut(i).iter_mut().zip(x) {
            *o += g * xj;
        }
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + RMS_EPS).sqrt()
}

fn rmsnorm(x: &[f64], gain: &[f64]) -> (Vec<f64>, f64) {
    let r = rms(x);
    (x.iter().zip(gain).map(|(v, g)| g * v / r).collect(), r)
}

/// Backward of `g ⊙ x / r`; accumulates into `dgain` and `dx`.
fn rmsnorm_backward(x: &[f64], r: f64, gain: &[f64], dout: &[f64], dgain: &mut [f64], dx: &mut [f64]) {
    let n = x.len() as f64;
    let mut dot = 0.0;
    let mut dxhat = vec![0.0; x.len()];
    for j in 0..x.len() {
        let xhat = x[j] / r;
        dgain[j] += dout[j] * xhat;
        dxhat[j] = dout[j] * gain[j];
        dot += dxhat[j] * xhat;
    }
    let mean = dot / n;
    for j in 0..x.len() {
        dx[j] += (dxhat[j] - (x[j] / r) * mean) / r;
    }
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn silu(u: f64) -> f64 {
    u * sigmoid(u)
}

fn silu_grad(u: f64) -> f64 {
    let s = sigmoid(u);
    s * (1.0 + u * (1.0 - s))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

// ---------------------------------------------------------------------------

/// Saved activations of one block for one sequence; rows are positions.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub x_in: Vec<Vec<f64>>,
    pub rms_attn: Vec<f64>,
    /// Input to q/k/v.
    pub a: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Causal attention rows, `att[t].len() == t + 1`.
    pub att: Vec<Vec<f64>>,
    /// Input to the output projection.
    pub ctx: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub rms_mlp: Vec<f64>,
    /// Input to the up projection.
    pub m: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    /// Input to the down projection.
    pub z: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SequenceCache {
    pub tokens: Vec<usize>,
    pub blocks: Vec<BlockCache>,
    pub x_final: Vec<Vec<f64>>,
    pub rms_final: Vec<f64>,
    /// Input to the head.
    pub f: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub sequences: Vec<SequenceCache>,
}

impl ForwardCache {
    /// Token-level inputs to an eligible matrix, stacked over the batch
    /// (tokens × in-features).
    pub fn layer_inputs(&self, layer: &str) -> Result<Tensor> {
        let pick = |s: &SequenceCache| -> Result<Vec<Vec<f64>>> {
            if layer == "head" {
                return Ok(s.f.clone());
            }
            let rest = layer
                .strip_prefix("blocks.")
                .ok_or_else(|| Error::UnknownTensor(layer.to_string()))?;
            let (idx, kind) = rest
                .split_once('.')
                .ok_or_else(|| Error::UnknownTensor(layer.to_string()))?;
            let block = idx
                .parse::<usize>()
                .ok()
                .and_then(|i| s.blocks.get(i))
                .ok_or_else(|| Error::UnknownTensor(layer.to_string()))?;
            Ok(match kind {
                "attn.q" | "attn.k" | "attn.v" => block.a.clone(),
                "attn.o" => block.ctx.clone(),
                "mlp.up" => block.m.clone(),
                "mlp.down" => block.z.clone(),
                _ => return Err(Error::UnknownTensor(layer.to_string())),
            })
        };
        let mut rows = Vec::new();
        for s in &self.sequences {
            rows.extend(pick(s)?);
        }
        let width = rows.first().map_or(0, Vec::len);
        let n = rows.len();
        Tensor::from_vec(vec![n, width], rows.into_iter().flatten().collect())
    }
}

fn check_tokens(config: &ModelConfig, tokens: &[Vec<usize>]) -> Result<usize> {
    let first = tokens.first().ok_or(Error::EmptyBatch)?;
    let len = first.len();
    if len == 0 {
        return Err(Error::EmptyBatch);
    }
    for seq in tokens {
        if seq.len() != len {
            return Err(Error::shape(&[len], &[seq.len()]));
        }
        if seq.len() > config.context_length {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                context: config.context_length,
            });
        }
        if let Some(&t) = seq.iter().find(|&&t| t >= config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: config.vocab_size,
            });
        }
    }
    Ok(len)
}

fn forward_sequence(p: &ParamSet, tokens: &[usize]) -> Result<(Vec<Vec<f64>>, SequenceCache)> {
    let cfg = &p.config;
    let d = cfg.d_model;
    let scale = 1.0 / (d as f64).sqrt();
    let tok_emb = p.get("tok_emb")?;
    let pos_emb = p.get("pos_emb")?;

    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| tok_emb.row(tok).iter().zip(pos_emb.row(t)).map(|(a, b)| a + b).collect())
        .collect();

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let pre = format!("blocks.{l}");
        let g_attn = p.get(&format!("{pre}.norm_attn"))?.data();
        let wq = p.get(&format!("{pre}.attn.q"))?;
        let wk = p.get(&format!("{pre}.attn.k"))?;
        let wv = p.get(&format!("{pre}.attn.v"))?;
        let wo = p.get(&format!("{pre}.attn.o"))?;
        let g_mlp = p.get(&format!("{pre}.norm_mlp"))?.data();
        let w_up = p.get(&format!("{pre}.mlp.up"))?;
        let w_down = p.get(&format!("{pre}.mlp.down"))?;

        let (a, rms_attn): (Vec<_>, Vec<_>) = x.iter().map(|xt| rmsnorm(xt, g_attn)).unzip();
        let q: Vec<_> = a.iter().map(|at| matvec(wq, at)).collect();
        let k: Vec<_> = a.iter().map(|at| matvec(wk, at)).collect();
        let v: Vec<_> = a.iter().map(|at| matvec(wv, at)).collect();

        let mut att = Vec::with_capacity(x.len());
        let mut ctx = Vec::with_capacity(x.len());
        for t in 0..x.len() {
            let scores: Vec<f64> = (0..=t)
                .map(|s| q[t].iter().zip(&k[s]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let w = softmax(&scores);
            let mut c = vec![0.0; d];
            for (s, &ws) in w.iter().enumerate() {
                for (ci, vi) in c.iter_mut().zip(&v[s]) {
                    *ci += ws * vi;
                }
            }
            att.push(w);
            ctx.push(c);
        }

        let y: Vec<Vec<f64>> = x
            .iter()
            .zip(&ctx)
            .map(|(xt, ct)| xt.iter().zip(matvec(wo, ct)).map(|(a, b)| a + b).collect())
            .collect();
        let (m, rms_mlp): (Vec<_>, Vec<_>) = y.iter().map(|yt| rmsnorm(yt, g_mlp)).unzip();
        let u: Vec<_> = m.iter().map(|mt| matvec(w_up, mt)).collect();
        let z: Vec<Vec<f64>> = u.iter().map(|ut| ut.iter().map(|&v| silu(v)).collect()).collect();
        let x_next: Vec<Vec<f64>> = y
            .iter()
            .zip(&z)
            .map(|(yt, zt)| yt.iter().zip(matvec(w_down, zt)).map(|(a, b)| a + b).collect())
            .collect();

        blocks.push(BlockCache {
            x_in: std::mem::replace(&mut x, x_next),
            rms_attn,
            a,
            q,
            k,
            v,
            att,
            ctx,
            y,
            rms_mlp,
            m,
            u,
            z,
        });
    }

    let g_final = p.get("norm_final")?.data();
    let head = p.get("head")?;
    let (f, rms_final): (Vec<_>, Vec<_>) = x.iter().map(|xt| rmsnorm(xt, g_final)).unzip();
    let logits: Vec<Vec<f64>> = f.iter().map(|ft| matvec(head, ft)).collect();
    let probs = logits.iter().map(|l| softmax(l)).collect();

    Ok((
        logits,
        SequenceCache {
            tokens: tokens.to_vec(),
            blocks,
            x_final: x,
            rms_final,
            f,
            probs,
        },
    ))
}

/// Logits of shape `[batch, seq, vocab]` plus the cache backward needs.
pub fn forward(params: &ParamSet, tokens: &[Vec<usize>]) -> Result<(Tensor, ForwardCache)> {
    let seq_len = check_tokens(&params.config, tokens)?;
    let vocab = params.config.vocab_size;
    let mut data = Vec::with_capacity(tokens.len() * seq_len * vocab);
    let mut sequences = Vec::with_capacity(tokens.len());
    for seq in tokens {
        let (logits, cache) = forward_sequence(params, seq)?;
        data.extend(logits.into_iter().flatten());
        sequences.push(cache);
    }
    let logits = Tensor::from_vec(vec![tokens.len(), seq_len, vocab], data)?;
    Ok((logits, ForwardCache { sequences }))
}

fn check_targets(tokens: &[Vec<usize>], targets: &[Vec<usize>], vocab: usize) -> Result<()> {
    if tokens.len() != targets.len() {
        return Err(Error::shape(&[tokens.len()], &[targets.len()]));
    }
    for (s, t) in tokens.iter().zip(targets) {
        if s.len() != t.len() {
            return Err(Error::shape(&[s.len()], &[t.len()]));
        }
        if let Some(&bad) = t.iter().find(|&&v| v >= vocab) {
            return Err(Error::TokenOutOfRange { token: bad, vocab });
        }
    }
    Ok(())
}

fn cross_entropy(cache: &ForwardCache, targets: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, tgt) in cache.sequences.iter().zip(targets) {
        for (p, &y) in s.probs.iter().zip(tgt) {
            total -= p[y].ln();
            count += 1;
        }
    }
    total / count as f64
}

/// Mean next-token cross-entropy.
pub fn loss(params: &ParamSet, tokens: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<f64> {
    check_targets(tokens, targets, params.config.vocab_size)?;
    let (_, cache) = forward(params, tokens)?;
    Ok(cross_entropy(&cache, targets))
}

/// Mean cross-entropy and greedy accuracy (ties resolved to the lowest index).
pub fn loss_and_accuracy(
    params: &ParamSet,
    tokens: &[Vec<usize>],
    targets: &[Vec<usize>],
) -> Result<(f64, f64)> {
    check_targets(tokens, targets, params.config.vocab_size)?;
    let (_, cache) = forward(params, tokens)?;
    let mut hits = 0usize;
    let mut count = 0usize;
    for (s, tgt) in cache.sequences.iter().zip(targets) {
        for (p, &y) in s.probs.iter().zip(tgt) {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            hits += usize::from(best == y);
            count += 1;
        }
    }
    Ok((cross_entropy(&cache, targets), hits as f64 / count as f64))
}

/// Mean cross-entropy and its exact gradient with respect to every tensor.
pub fn loss_and_backward(
    params: &ParamSet,
    tokens: &[Vec<usize>],
    targets: &[Vec<usize>],
) -> Result<(f64, ParamSet)> {
    check_targets(tokens, targets, params.config.vocab_size)?;
    let (_, cache) = forward(params, tokens)?;
    let loss = cross_entropy(&cache, targets);
    let n_positions: usize = targets.iter().map(Vec::len).sum();
    let inv_n = 1.0 / n_positions as f64;

    let cfg = &params.config;
    let d = cfg.d_model;
    let scale = 1.0 / (d as f64).sqrt();
    let mut grads = params.zeros_like();
    let mut g = |name: &str| -> Result<Tensor> {
        // take ownership while accumulating, put back at the end
        Ok(std::mem::replace(grads.get_mut(name)?, Tensor::zeros(&[0])))
    };

    let mut d_head = g("head")?;
    let mut d_norm_final = g("norm_final")?;
    let mut d_tok = g("tok_emb")?;
    let mut d_pos = g("pos_emb")?;
    let mut d_blocks: Vec<[Tensor; 8]> = (0..cfg.n_layers)
        .map(|l| {
            let p = format!("blocks.{l}");
            Ok([
                g(&format!("{p}.norm_attn"))?,
                g(&format!("{p}.attn.q"))?,
                g(&format!("{p}.attn.k"))?,
                g(&format!("{p}.attn.v"))?,
                g(&format!("{p}.attn.o"))?,
                g(&format!("{p}.norm_mlp"))?,
                g(&format!("{p}.mlp.up"))?,
                g(&format!("{p}.mlp.down"))?,
            ])
        })
        .collect::<Result<_>>()?;

    let head = params.get("head")?;
    let g_final = params.get("norm_final")?.data();

    for (seq, tgt) in cache.sequences.iter().zip(targets) {
        let len = seq.tokens.len();
        // gradient w.r.t. the residual stream entering the final norm
        let mut dx: Vec<Vec<f64>> = vec![vec![0.0; d]; len];
        for t in 0..len {
            let mut dlogits = seq.probs[t].clone();
            dlogits[tgt[t]] -= 1.0;
            for v in &mut dlogits {
                *v *= inv_n;
            }
            outer_acc(&mut d_head, &dlogits, &seq.f[t]);
            let mut df = vec![0.0; d];
            matvec_t_acc(head, &dlogits, &mut df);
            rmsnorm_backward(
                &seq.x_final[t],
                seq.rms_final[t],
                g_final,
                &df,
                d_norm_final.data_mut(),
                &mut dx[t],
            );
        }

        for l in (0..cfg.n_layers).rev() {
            let pre = format!("blocks.{l}");
            let c = &seq.blocks[l];
            let [dg_attn, dwq, dwk, dwv, dwo, dg_mlp, dw_up, dw_down] = &mut d_blocks[l];
            let g_attn = params.get(&format!("{pre}.norm_attn"))?.data();
            let wq = params.get(&format!("{pre}.attn.q"))?;
            let wk = params.get(&format!("{pre}.attn.k"))?;
            let wv = params.get(&format!("{pre}.attn.v"))?;
            let wo = params.get(&format!("{pre}.attn.o"))?;
            let g_mlp = params.get(&format!("{pre}.norm_mlp"))?.data();
            let w_up = params.get(&format!("{pre}.mlp.up"))?;
            let w_down = params.get(&format!("{pre}.mlp.down"))?;

            // MLP branch: x' = y + Wdown silu(Wup m)
            let mut dy = dx.clone();
            for t in 0..len {
                outer_acc(dw_down, &dx[t], &c.z[t]);
                let mut dz = vec![0.0; cfg.d_ff];
                matvec_t_acc(w_down, &dx[t], &mut dz);
                let du: Vec<f64> = dz.iter().zip(&c.u[t]).map(|(g, &u)| g * silu_grad(u)).collect();
                outer_acc(dw_up, &du, &c.m[t]);
                let mut dm = vec![0.0; d];
                matvec_t_acc(w_up, &du, &mut dm);
                rmsnorm_backward(&c.y[t], c.rms_mlp[t], g_mlp, &dm, dg_mlp.data_mut(), &mut dy[t]);
            }

            // attention branch: y = x + Wo ctx
            let mut dx_in = dy.clone();
            let mut dq = vec![vec![0.0; d]; len];
            let mut dk = vec![vec![0.0; d]; len];
            let mut dv = vec![vec![0.0; d]; len];
            for t in 0..len {
                outer_acc(dwo, &dy[t], &c.ctx[t]);
                let mut dctx = vec![0.0; d];
                matvec_t_acc(wo, &dy[t], &mut dctx);
                let w = &c.att[t];
                let datt: Vec<f64> = (0..=t)
                    .map(|s| dctx.iter().zip(&c.v[s]).map(|(a, b)| a * b).sum())
                    .collect();
                let inner: f64 = w.iter().zip(&datt).map(|(a, b)| a * b).sum();
                for s in 0..=t {
                    for (dvi, ci) in dv[s].iter_mut().zip(&dctx) {
                        *dvi += w[s] * ci;
                    }
                    let ds = w[s] * (datt[s] - inner) * scale;
                    for j in 0..d {
                        dq[t][j] += ds * c.k[s][j];
                        dk[s][j] += ds * c.q[t][j];
                    }
                }
            }
            for t in 0..len {
                outer_acc(dwq, &dq[t], &c.a[t]);
                outer_acc(dwk, &dk[t], &c.a[t]);
                outer_acc(dwv, &dv[t], &c.a[t]);
                let mut da = vec![0.0; d];
                matvec_t_acc(wq, &dq[t], &mut da);
                matvec_t_acc(wk, &dk[t], &mut da);
                matvec_t_acc(wv, &dv[t], &mut da);
                rmsnorm_backward(&c.x_in[t], c.rms_attn[t], g_attn, &da, dg_attn.data_mut(), &mut dx_in[t]);
            }
            dx = dx_in;
        }

        for (t, &tok) in seq.tokens.iter().enumerate() {
            for (o, gv) in d_tok.row_mut(tok).iter_mut().zip(&dx[t]) {
                *o += gv;
            }
            for (o, gv) in d_pos.row_mut(t).iter_mut().zip(&dx[t]) {
                *o += gv;
            }
        }
    }

    grads.set_raw("head", d_head);
    grads.set_raw("norm_final", d_norm_final);
    grads.set_raw("tok_emb", d_tok);
    grads.set_raw("pos_emb", d_pos);
    for (l, ts) in d_blocks.into_iter().enumerate() {
        let names = [
            "norm_attn", "attn.q", "attn.k", "attn.v", "attn.o", "norm_mlp", "mlp.up", "mlp.down",
        ];
        for (n, t) in names.iter().zip(ts) {
            grads.set_raw(&format!("blocks.{l}.{n}"), t);
        }
    }
    Ok((loss, grads))
}

impl ParamSet {
    fn set_raw(&mut self, name: &str, tensor: Tensor) {
        self.tensors.insert(name.to_string(), tensor);
    }
}
