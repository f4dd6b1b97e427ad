//! Training loop: noise-before-gradient steps, salient-only masking, the
//! noise-after-gradient variant, STE, and the warmup + cosine schedule.
//!
//! A step evaluates the gradient at the (possibly perturbed or quantized)
//! forward weights and applies it to the clean parameters:
//! `θ ← θ − η_t · opt(mask(∇f(θ + ξ)))`.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, is_eligible, ParamSet};
use crate::noise::{inject_params, NoisePlan, NoiseStreams};
use crate::partition::SalientPartition;
use crate::quantizer::{fake_quantize_row, search_row_scales, BitWidth, QuantSpec};
use crate::tensor::SeededRng;

/// Stream ids reserved next to the per-layer noise streams (which use
/// `1..=n_layers`). Gradient noise draws tensor by tensor in name order.
pub const DATA_STREAM: u64 = 1 << 32;
pub const GRAD_NOISE_STREAM: u64 = (1 << 32) + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Noise in non-salient columns, only salient columns update.
    Giftsw,
    /// Only salient columns update, no noise.
    SalientFt,
    FullFt,
    /// Noise in non-salient columns, everything updates.
    FullFtNoise,
    /// Forward through quantized non-salient weights, update full-precision
    /// master weights.
    Ste,
}

impl TrainMode {
    pub fn salient_only(self) -> bool {
        matches!(self, TrainMode::Giftsw | TrainMode::SalientFt)
    }

    pub fn injects_noise(self) -> bool {
        matches!(self, TrainMode::Giftsw | TrainMode::FullFtNoise)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Giftsw => "giftsw",
            TrainMode::SalientFt => "salient_ft",
            TrainMode::FullFt => "full_ft",
            TrainMode::FullFtNoise => "full_ft_noise",
            TrainMode::Ste => "ste",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub warmup_ratio: f64,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Bit-width whose step sizes scale the injected noise.
    pub noise_bits: BitWidth,
    /// Evaluate every this many steps (0 disables periodic eval).
    pub eval_every: usize,
    /// Std of the gradient noise used by [`Trainer::step_pgd_post`].
    pub grad_noise_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Giftsw,
            steps: 300,
            warmup_ratio: 0.03,
            peak_lr: 1e-3,
            batch_size: 16,
            seed: 0,
            optimizer: OptimizerKind::default(),
            noise_bits: BitWidth::new(4).unwrap(),
            eval_every: 50,
            grad_noise_std: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::InvalidConfig("warmup_ratio must be in [0, 1)".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::InvalidConfig("peak_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.grad_noise_std < 0.0 {
            return Err(Error::InvalidConfig("grad_noise_std must be nonnegative".into()));
        }
        Ok(())
    }

    /// `ceil(warmup_ratio · T)`, capped at `T − 1` so the decay phase is
    /// never empty.
    pub fn warmup_steps(&self) -> usize {
        let w = (self.warmup_ratio * self.steps as f64).ceil() as usize;
        w.min(self.steps.saturating_sub(1))
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at `T`.
pub fn lr_at(t: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.steps;
    if t > total {
        return Err(Error::StepOutOfRange { step: t, total });
    }
    let warmup = cfg.warmup_steps();
    if t < warmup {
        return Ok(cfg.peak_lr * t as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(0.0);
    }
    let progress = (t - warmup) as f64 / (total - warmup) as f64;
    Ok(cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Zeroes what a mode must not train. Salient-only modes keep only the
/// salient columns of eligible tensors and zero every ineligible tensor;
/// other modes leave gradients untouched.
pub fn mask_gradients(
    grads: &mut ParamSet,
    partitions: &BTreeMap<String, SalientPartition>,
    mode: TrainMode,
) -> Result<()> {
    if !mode.salient_only() {
        return Ok(());
    }
    for (name, g) in grads.iter_mut() {
        if !is_eligible(name) {
            g.data_mut().fill(0.0);
            continue;
        }
        let partition = partitions
            .get(name)
            .ok_or_else(|| Error::MissingPartition(name.to_string()))?;
        if partition.width() != g.cols() {
            return Err(Error::shape(&[g.rows(), partition.width()], g.shape()));
        }
        for r in 0..g.rows() {
            let row = g.row_mut(r);
            for &c in partition.non_salient() {
                row[c] = 0.0;
            }
        }
    }
    Ok(())
}

/// Number of parameters a mode updates.
pub fn trainable_count(params: &ParamSet, partitions: &BTreeMap<String, SalientPartition>, mode: TrainMode) -> usize {
    if !mode.salient_only() {
        return params.param_count();
    }
    params
        .iter()
        .filter(|(n, _)| is_eligible(n))
        .map(|(n, t)| partitions.get(n).map_or(0, |p| p.k() * t.rows()))
        .sum()
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }

    pub fn apply(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        self.step += 1;
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?.data();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.data_mut().iter_mut().zip(g) {
                        *w -= lr * gi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                        *w -= lr * update;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Fixed per-row steps for STE, searched once on the non-salient columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SteScales {
    pub bits: BitWidth,
    pub layers: BTreeMap<String, Vec<f64>>,
}

impl SteScales {
    pub fn build(
        params: &ParamSet,
        partitions: &BTreeMap<String, SalientPartition>,
        spec: &QuantSpec,
    ) -> Result<SteScales> {
        let mut layers = BTreeMap::new();
        for name in params.eligible_names() {
            let partition = partitions
                .get(&name)
                .ok_or_else(|| Error::MissingPartition(name.clone()))?;
            let scales = search_row_scales(params.get(&name)?, partition.non_salient(), spec, None)?;
            layers.insert(name, scales.into_iter().map(|s| s.delta).collect());
        }
        Ok(SteScales { bits: spec.bits, layers })
    }

    /// Parameters with non-salient columns of every eligible tensor replaced
    /// by their quantize-dequantize round trip.
    pub fn quantized_view(
        &self,
        params: &ParamSet,
        partitions: &BTreeMap<String, SalientPartition>,
    ) -> Result<ParamSet> {
        let mut out = params.clone();
        for (name, delta) in &self.layers {
            let partition = partitions
                .get(name)
                .ok_or_else(|| Error::MissingPartition(name.clone()))?;
            let w = out.get_mut(name)?;
            for (r, &d) in delta.iter().enumerate() {
                let cols = partition.non_salient();
                let vals: Vec<f64> = cols.iter().map(|&c| w.get(r, c)).collect();
                let q = fake_quantize_row(&vals, d, self.bits)?;
                for (&c, v) in cols.iter().zip(q) {
                    w.set(r, c, v);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

/// Anything that can hand out training batches.
pub trait BatchSampler {
    fn sample(&mut self, batch_size: usize, rng: &mut SeededRng) -> Batch;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub noise_active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Step(StepRecord),
    Eval(EvalRecord),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl MetricsLog {
    /// JSON lines, steps and evals interleaved in step order (an eval at
    /// step `s` follows the record of step `s − 1`).
    pub fn to_jsonl(&self) -> Result<String> {
        let mut lines: Vec<(usize, u8, LogLine)> = Vec::new();
        for s in &self.steps {
            lines.push((s.step + 1, 0, LogLine::Step(s.clone())));
        }
        for e in &self.evals {
            lines.push((e.step, 1, LogLine::Eval(e.clone())));
        }
        lines.sort_by_key(|(k, o, _)| (*k, *o));
        let mut out = String::new();
        for (_, _, line) in lines {
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    partitions: &'a BTreeMap<String, SalientPartition>,
    plan: Option<&'a NoisePlan>,
    ste: Option<&'a SteScales>,
    optimizer: Optimizer,
    streams: NoiseStreams,
    grad_rng: SeededRng,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: &TrainConfig,
        params: &ParamSet,
        partitions: &'a BTreeMap<String, SalientPartition>,
        plan: Option<&'a NoisePlan>,
        ste: Option<&'a SteScales>,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode.injects_noise() && plan.is_none() {
            return Err(Error::MissingPlan(cfg.mode.name()));
        }
        if cfg.mode == TrainMode::Ste && ste.is_none() {
            return Err(Error::MissingSpec);
        }
        if cfg.mode.salient_only() || cfg.mode == TrainMode::Ste {
            if let Some(missing) = params.eligible_names().into_iter().find(|n| !partitions.contains_key(n)) {
                return Err(Error::MissingPartition(missing));
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            partitions,
            plan,
            ste,
            optimizer: Optimizer::new(cfg.optimizer),
            streams: NoiseStreams::new(cfg.seed, &params.eligible_names()),
            grad_rng: SeededRng::with_stream(cfg.seed, GRAD_NOISE_STREAM),
        })
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    fn noise_active(&self) -> bool {
        self.cfg.mode.injects_noise() && self.plan.is_some_and(|p| p.enabled && !p.layers.is_empty())
    }

    /// Weights the forward pass sees for this step.
    fn forward_weights<'p>(&mut self, params: &'p ParamSet) -> Result<Cow<'p, ParamSet>> {
        match self.cfg.mode {
            TrainMode::Giftsw | TrainMode::FullFtNoise => {
                let plan = self.plan.ok_or(Error::MissingPlan(self.cfg.mode.name()))?;
                if !plan.enabled {
                    return Ok(Cow::Borrowed(params));
                }
                Ok(Cow::Owned(inject_params(params, self.partitions, plan, &mut self.streams)?))
            }
            TrainMode::Ste => {
                let ste = self.ste.ok_or(Error::MissingSpec)?;
                Ok(Cow::Owned(ste.quantized_view(params, self.partitions)?))
            }
            TrainMode::SalientFt | TrainMode::FullFt => Ok(Cow::Borrowed(params)),
        }
    }

    /// One update: gradient at the mode's forward weights, masked per mode,
    /// applied to the clean parameters with `lr_at(t)`.
    pub fn step(&mut self, params: &mut ParamSet, batch: &Batch, t: usize) -> Result<StepRecord> {
        let lr = lr_at(t, &self.cfg)?;
        let noise_active = self.noise_active();
        let (loss, mut grads) = {
            let fwd = self.forward_weights(params)?;
            model::loss_and_backward(&fwd, &batch.inputs, &batch.targets)?
        };
        mask_gradients(&mut grads, self.partitions, self.cfg.mode)?;
        self.optimizer.apply(params, &grads, lr)?;
        Ok(StepRecord {
            step: t,
            lr,
            train_loss: loss,
            noise_active,
        })
    }

    /// Noise after the gradient: `θ ← θ − η (∇f(θ) + ξ)`, with
    /// `ξ ~ N(0, grad_noise_std²)` on every entry. Full-parameter modes only.
    pub fn step_pgd_post(&mut self, params: &mut ParamSet, batch: &Batch, t: usize) -> Result<StepRecord> {
        if self.cfg.mode != TrainMode::FullFt {
            return Err(Error::InvalidConfig(format!(
                "post-gradient noise needs mode full_ft, got {}",
                self.cfg.mode.name()
            )));
        }
        let lr = lr_at(t, &self.cfg)?;
        let (loss, mut grads) = model::loss_and_backward(params, &batch.inputs, &batch.targets)?;
        let std = self.cfg.grad_noise_std;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v += std * self.grad_rng.gaussian();
            }
        }
        self.optimizer.apply(params, &grads, lr)?;
        Ok(StepRecord {
            step: t,
            lr,
            train_loss: loss,
            noise_active: std > 0.0,
        })
    }
}

/// Held-out evaluation on clean weights: mean cross-entropy and greedy
/// next-token accuracy.
pub fn evaluate(params: &ParamSet, eval: &Batch) -> Result<EvalRecord> {
    if eval.inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (eval_loss, eval_accuracy) = model::loss_and_accuracy(params, &eval.inputs, &eval.targets)?;
    Ok(EvalRecord {
        step: 0,
        eval_loss,
        eval_accuracy,
    })
}

/// Everything a training run needs besides the parameters.
pub struct TrainRun<'a> {
    pub cfg: &'a TrainConfig,
    pub partitions: &'a BTreeMap<String, SalientPartition>,
    pub plan: Option<&'a NoisePlan>,
    pub ste: Option<&'a SteScales>,
    pub sampler: &'a mut dyn BatchSampler,
    pub eval: Option<&'a Batch>,
}

/// Runs `cfg.steps` steps. Evaluates before the first step, every
/// `eval_every` steps and after the last one.
pub fn train(mut params: ParamSet, run: TrainRun<'_>) -> Result<(ParamSet, MetricsLog)> {
    let mut trainer = Trainer::new(run.cfg, &params, run.partitions, run.plan, run.ste)?;
    let mut data_rng = SeededRng::with_stream(run.cfg.seed, DATA_STREAM);
    let mut log = MetricsLog::default();
    let total = run.cfg.steps;
    let eval_at = |params: &ParamSet, step: usize, log: &mut MetricsLog| -> Result<()> {
        if let Some(eval) = run.eval {
            let mut rec = evaluate(params, eval)?;
            rec.step = step;
            log.evals.push(rec);
        }
        Ok(())
    };
    eval_at(&params, 0, &mut log)?;
    for t in 0..total {
        let batch = run.sampler.sample(run.cfg.batch_size, &mut data_rng);
        let rec = trainer.step(&mut params, &batch, t)?;
        log.steps.push(rec);
        let done = t + 1;
        let periodic = run.cfg.eval_every > 0 && done % run.cfg.eval_every == 0;
        if periodic || done == total {
            eval_at(&params, done, &mut log)?;
        }
    }
    Ok((params, log))
}
