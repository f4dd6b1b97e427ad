//! Column sensitivity `s_j = ‖D_j‖_τ · ‖X_j‖_ρ^γ` and salient column selection.
//!
//! `D` is the perturbation a column suffers (quantization error or, for
//! pruning, the weights themselves) and `X_j` aggregates the calibration
//! inputs feeding column `j`. Known metrics fall out as presets:
//!
//! | preset           | weight term   | τ | ρ | γ |
//! |------------------|---------------|---|---|---|
//! | `giftsw-default` | `‖D_j‖`       | ∞ | ∞ | 1 |
//! | `quik`           | omitted       | – | ∞ | 1 |
//! | `owq`            | `‖D_j‖²`      | 2 | 2 | 2 |
//! | `wanda`          | `‖D_j‖`, D=W  | 1 | 2 | 1 |

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::partition::SalientPartition;
use crate::model::{self, ParamSet};
use crate::quantizer::{self, QuantSpec};
use crate::tensor::{norm, top_k_indices, NormOrder, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationSource {
    Quantization,
    Pruning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightTerm {
    Norm,
    SquaredNorm,
    Omitted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MetricInput", into = "MetricRepr")]
pub struct MetricConfig {
    pub tau: NormOrder,
    pub rho: NormOrder,
    gamma: f64,
    pub source: PerturbationSource,
    pub weight_term: WeightTerm,
}

#[derive(Serialize, Deserialize)]
struct MetricRepr {
    tau: NormOrder,
    rho: NormOrder,
    gamma: f64,
    source: PerturbationSource,
    weight_term: WeightTerm,
}

/// Specs may name a preset instead of spelling out every field.
#[derive(Deserialize)]
#[serde(untagged)]
enum MetricInput {
    Preset(String),
    Fields(MetricRepr),
}

impl TryFrom<MetricInput> for MetricConfig {
    type Error = Error;
    fn try_from(input: MetricInput) -> Result<Self> {
        match input {
            MetricInput::Preset(name) => MetricConfig::preset(&name),
            MetricInput::Fields(r) => MetricConfig::new(r.tau, r.rho, r.gamma, r.source, r.weight_term),
        }
    }
}

impl From<MetricConfig> for MetricRepr {
    fn from(m: MetricConfig) -> Self {
        MetricRepr {
            tau: m.tau,
            rho: m.rho,
            gamma: m.gamma,
            source: m.source,
            weight_term: m.weight_term,
        }
    }
}

impl MetricConfig {
    pub fn new(
        tau: NormOrder,
        rho: NormOrder,
        gamma: f64,
        source: PerturbationSource,
        weight_term: WeightTerm,
    ) -> Result<Self> {
        if ![0.5, 1.0, 2.0].contains(&gamma) {
            return Err(Error::InvalidConfig(format!("gamma must be 0.5, 1 or 2, got {gamma}")));
        }
        Ok(Self {
            tau,
            rho,
            gamma,
            source,
            weight_term,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn giftsw_default() -> Self {
        Self::new(NormOrder::Inf, NormOrder::Inf, 1.0, PerturbationSource::Quantization, WeightTerm::Norm)
            .unwrap()
    }

    pub fn quik() -> Self {
        Self::new(NormOrder::Inf, NormOrder::Inf, 1.0, PerturbationSource::Quantization, WeightTerm::Omitted)
            .unwrap()
    }

    pub fn owq() -> Self {
        Self::new(NormOrder::L2, NormOrder::L2, 2.0, PerturbationSource::Quantization, WeightTerm::SquaredNorm)
            .unwrap()
    }

    pub fn wanda() -> Self {
        Self::new(NormOrder::L1, NormOrder::L2, 1.0, PerturbationSource::Pruning, WeightTerm::Norm).unwrap()
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "giftsw-default" | "giftsw" => Ok(Self::giftsw_default()),
            "quik" => Ok(Self::quik()),
            "owq" => Ok(Self::owq()),
            "wanda" => Ok(Self::wanda()),
            other => Err(Error::InvalidConfig(format!("unknown metric preset `{other}`"))),
        }
    }

    pub fn with_gamma(self, gamma: f64) -> Result<Self> {
        Self::new(self.tau, self.rho, gamma, self.source, self.weight_term)
    }
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self::giftsw_default()
    }
}

/// Per-column norms of the calibration inputs of one layer, pooled over all
/// calibration tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub linf: Vec<f64>,
    pub token_count: usize,
}

impl ActivationStats {
    /// Reduces a tokens × columns input matrix.
    pub fn from_inputs(inputs: &Tensor) -> Result<Self> {
        if !inputs.is_matrix() || inputs.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        let width = inputs.cols();
        let mut l1 = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let mut linf = vec![0.0f64; width];
        for t in 0..inputs.rows() {
            for (j, &x) in inputs.row(t).iter().enumerate() {
                l1[j] += x.abs();
                sq[j] += x * x;
                linf[j] = linf[j].max(x.abs());
            }
        }
        Ok(Self {
            l1,
            l2: sq.into_iter().map(f64::sqrt).collect(),
            linf,
            token_count: inputs.rows(),
        })
    }

    pub fn width(&self) -> usize {
        self.linf.len()
    }

    pub fn at(&self, order: NormOrder) -> &[f64] {
        match order {
            NormOrder::L1 => &self.l1,
            NormOrder::L2 => &self.l2,
            NormOrder::Inf => &self.linf,
        }
    }
}

/// Stacked per-layer inputs for every eligible matrix over a calibration
/// batch.
pub fn capture_inputs(params: &ParamSet, batch: &[Vec<usize>]) -> Result<BTreeMap<String, Tensor>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (_, cache) = model::forward(params, batch)?;
    params
        .eligible_names()
        .into_iter()
        .map(|name| {
            let x = cache.layer_inputs(&name)?;
            Ok((name, x))
        })
        .collect()
}

pub fn capture_activations(params: &ParamSet, layer: &str, batch: &[Vec<usize>]) -> Result<ActivationStats> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    params.get(layer)?;
    let (_, cache) = model::forward(params, batch)?;
    ActivationStats::from_inputs(&cache.layer_inputs(layer)?)
}

/// `D = W − Q(W)` (whole-matrix row scales) or `D = W` for pruning.
pub fn perturbation_matrix(w: &Tensor, source: PerturbationSource, spec: Option<&QuantSpec>) -> Result<Tensor> {
    match source {
        PerturbationSource::Pruning => Ok(w.clone()),
        PerturbationSource::Quantization => {
            let spec = spec.ok_or(Error::MissingSpec)?;
            w.sub(&quantizer::quantize_dequantize(w, spec)?)
        }
    }
}

fn pow_gamma(x: f64, gamma: f64) -> f64 {
    if gamma == 0.5 {
        x.sqrt()
    } else if gamma == 1.0 {
        x
    } else {
        x * x
    }
}

pub fn column_sensitivity(d: &Tensor, stats: &ActivationStats, cfg: &MetricConfig) -> Result<Vec<f64>> {
    if d.cols() != stats.width() {
        return Err(Error::shape(&[d.rows(), stats.width()], d.shape()));
    }
    let act = stats.at(cfg.rho);
    (0..d.cols())
        .map(|j| {
            let weight = match cfg.weight_term {
                WeightTerm::Omitted => 1.0,
                WeightTerm::Norm => norm(&d.column(j), cfg.tau)?,
                WeightTerm::SquaredNorm => norm(&d.column(j), cfg.tau)?.powi(2),
            };
            Ok(weight * pow_gamma(act[j], cfg.gamma))
        })
        .collect()
}

pub fn select_salient(scores: &[f64], k: usize) -> Result<SalientPartition> {
    let salient = top_k_indices(scores, k)?;
    SalientPartition::new(scores.len(), salient)
}

/// Calibration outcome for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub k: usize,
    pub salient: Vec<usize>,
    pub scores: Vec<f64>,
    pub metric: MetricConfig,
    pub stats: ActivationStats,
}

impl LayerSelection {
    pub fn partition(&self) -> Result<SalientPartition> {
        SalientPartition::new(self.scores.len(), self.salient.clone())
    }
}

/// Per-layer activation statistics from captured inputs.
pub fn stats_from_inputs(inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, ActivationStats>> {
    inputs
        .iter()
        .map(|(name, x)| Ok((name.clone(), ActivationStats::from_inputs(x)?)))
        .collect()
}

/// Scores and selects `min(k, width)` salient columns for every eligible
/// layer from precomputed activation statistics.
pub fn select_from_stats(
    params: &ParamSet,
    stats: &BTreeMap<String, ActivationStats>,
    metric: &MetricConfig,
    k: usize,
    perturb_spec: Option<&QuantSpec>,
) -> Result<BTreeMap<String, LayerSelection>> {
    let mut out = BTreeMap::new();
    for name in params.eligible_names() {
        let w = params.get(&name)?;
        let stats = stats.get(&name).ok_or_else(|| Error::UnknownTensor(name.clone()))?;
        let d = perturbation_matrix(w, metric.source, perturb_spec)?;
        let scores = column_sensitivity(&d, stats, metric)?;
        let k_layer = k.min(w.cols());
        let partition = select_salient(&scores, k_layer)?;
        out.insert(
            name,
            LayerSelection {
                k: k_layer,
                salient: partition.salient().to_vec(),
                scores,
                metric: *metric,
                stats: stats.clone(),
            },
        );
    }
    Ok(out)
}

/// Scores and selects `min(k, width)` salient columns for every eligible
/// layer from calibration inputs.
pub fn select_from_inputs(
    params: &ParamSet,
    inputs: &BTreeMap<String, Tensor>,
    metric: &MetricConfig,
    k: usize,
    perturb_spec: Option<&QuantSpec>,
) -> Result<BTreeMap<String, LayerSelection>> {
    select_from_stats(params, &stats_from_inputs(inputs)?, metric, k, perturb_spec)
}

/// Runs the calibration batch through the model and selects salient columns
/// for every eligible layer.
pub fn calibrate(
    params: &ParamSet,
    batch: &[Vec<usize>],
    metric: &MetricConfig,
    k: usize,
    perturb_spec: Option<&QuantSpec>,
) -> Result<BTreeMap<String, LayerSelection>> {
    let inputs = capture_inputs(params, batch)?;
    select_from_inputs(params, &inputs, metric, k, perturb_spec)
}

/// Re-ranks already captured statistics under a different metric or `k`.
pub fn reselect(
    params: &ParamSet,
    previous: &BTreeMap<String, LayerSelection>,
    metric: &MetricConfig,
    k: usize,
    perturb_spec: Option<&QuantSpec>,
) -> Result<BTreeMap<String, LayerSelection>> {
    let stats = previous.iter().map(|(n, s)| (n.clone(), s.stats.clone())).collect();
    select_from_stats(params, &stats, metric, k, perturb_spec)
}

pub fn partitions_of(selection: &BTreeMap<String, LayerSelection>) -> Result<BTreeMap<String, SalientPartition>> {
    selection
        .iter()
        .map(|(k, s)| Ok((k.clone(), s.partition()?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::quantizer::BitWidth;
    use crate::tensor::{sample_gaussian, SeededRng};

    #[test]
    fn stats_examples() {
        let zero = ActivationStats::from_inputs(&Tensor::zeros(&[3, 2])).unwrap();
        assert!(zero.l1.iter().chain(&zero.l2).chain(&zero.linf).all(|&v| v == 0.0));

        let one = ActivationStats::from_inputs(&Tensor::matrix(&[&[1.0, -2.0]])).unwrap();
        assert_eq!(one.l1, vec![1.0, 2.0]);
        assert_eq!(one.l2, vec![1.0, 2.0]);
        assert_eq!(one.linf, vec![1.0, 2.0]);

        let two = ActivationStats::from_inputs(&Tensor::matrix(&[&[1.0, 0.0], &[-3.0, 4.0]])).unwrap();
        assert_eq!(two.linf, vec![3.0, 4.0]);
        assert_eq!(two.l1, vec![4.0, 4.0]);
        assert_eq!(two.l2, vec![10f64.sqrt(), 4.0]);
        assert_eq!(two.token_count, 2);

        assert!(matches!(ActivationStats::from_inputs(&Tensor::zeros(&[0, 2])), Err(Error::EmptyBatch)));
    }

    #[test]
    fn stats_agree_with_norm_reducer() {
        let x = sample_gaussian(&[9, 4], &mut SeededRng::new(1));
        let s = ActivationStats::from_inputs(&x).unwrap();
        for j in 0..4 {
            let col = x.column(j);
            assert_eq!(s.l1[j], norm(&col, NormOrder::L1).unwrap());
            assert!((s.l2[j] - norm(&col, NormOrder::L2).unwrap()).abs() < 1e-14);
            assert_eq!(s.linf[j], norm(&col, NormOrder::Inf).unwrap());
            assert!(s.linf[j] <= s.l1[j]);
        }
    }

    #[test]
    fn perturbation_sources() {
        let w = sample_gaussian(&[4, 4], &mut SeededRng::new(2));
        assert_eq!(perturbation_matrix(&w, PerturbationSource::Pruning, None).unwrap().to_le_bytes(), w.to_le_bytes());
        assert!(matches!(
            perturbation_matrix(&w, PerturbationSource::Quantization, None),
            Err(Error::MissingSpec)
        ));

        let spec = QuantSpec::new(BitWidth::new(3).unwrap());
        let d = perturbation_matrix(&w, PerturbationSource::Quantization, Some(&spec)).unwrap();
        // oracle: per-row search then subtract, entry by entry
        for r in 0..4 {
            let delta = quantizer::search_scale(w.row(r), spec.bits, spec.grid_points).unwrap().delta;
            for c in 0..4 {
                let q = (w.get(r, c) / delta).round_ties_even().clamp(-4.0, 3.0);
                assert_eq!(d.get(r, c), w.get(r, c) - delta * q);
            }
        }

        // rows already on a 4-bit grid reproduce exactly
        let exact = Tensor::matrix(&[&[-1.0, 0.0, 1.0], &[0.5, -0.5, 0.0]]);
        let spec = QuantSpec::new(BitWidth::new(4).unwrap()).with_grid_points(7);
        let d = perturbation_matrix(&exact, PerturbationSource::Quantization, Some(&spec)).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sensitivity_examples() {
        let d = Tensor::matrix(&[&[1.0, 0.5], &[-1.0, 0.25]]);
        let stats = ActivationStats {
            l1: vec![0.0, 0.0],
            l2: vec![0.0, 0.0],
            linf: vec![2.0, 4.0],
            token_count: 1,
        };
        let s = column_sensitivity(&d, &stats, &MetricConfig::giftsw_default()).unwrap();
        assert_eq!(s, vec![2.0, 2.0]);
        assert_eq!(select_salient(&s, 1).unwrap().salient(), &[0]);

        // zero activations zero every score for any gamma
        for g in [0.5, 1.0, 2.0] {
            let cfg = MetricConfig::owq().with_gamma(g).unwrap();
            assert!(column_sensitivity(&d, &stats, &cfg).unwrap().iter().all(|&v| v == 0.0));
        }
        // a zero perturbation column zeroes its score
        let d0 = Tensor::matrix(&[&[0.0, 0.5], &[0.0, 0.25]]);
        assert_eq!(column_sensitivity(&d0, &stats, &MetricConfig::giftsw_default()).unwrap()[0], 0.0);

        assert!(column_sensitivity(&Tensor::zeros(&[2, 3]), &stats, &MetricConfig::quik()).is_err());
        assert!(MetricConfig::giftsw_default().with_gamma(3.0).is_err());
    }

    #[test]
    fn select_edge_cases() {
        let s = [3.0, 1.0, 2.0];
        assert_eq!(select_salient(&s, 3).unwrap().non_salient(), &[] as &[usize]);
        assert_eq!(select_salient(&s, 0).unwrap().non_salient(), &[0, 1, 2]);
        assert!(select_salient(&s, 4).is_err());
    }

    #[test]
    fn calibrate_selects_min_k_width() {
        let cfg = ModelConfig {
            vocab_size: 6,
            context_length: 8,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 8,
            seed: 0,
            init_std: 0.3,
        };
        let p = init_params(&cfg, &mut SeededRng::new(0)).unwrap();
        let batch = vec![vec![0, 1, 2, 3], vec![4, 5, 0, 1]];
        let spec = QuantSpec::new(BitWidth::new(4).unwrap());
        let sel = calibrate(&p, &batch, &MetricConfig::default(), 6, Some(&spec)).unwrap();
        assert_eq!(sel.len(), 7);
        for (name, s) in &sel {
            let width = p.get(name).unwrap().cols();
            assert_eq!(s.salient.len(), 6.min(width), "{name}");
            assert_eq!(s.stats.token_count, 8);
        }
        let json = serde_json::to_string(&sel).unwrap();
        let back: BTreeMap<String, LayerSelection> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sel);

        let direct = capture_activations(&p, "blocks.0.mlp.down", &batch).unwrap();
        assert_eq!(direct, sel["blocks.0.mlp.down"].stats);
        assert!(capture_activations(&p, "blocks.0.mlp.down", &[]).is_err());
    }

    #[test]
    fn scores_are_permutation_equivariant() {
        let mut rng = SeededRng::new(5);
        let w = sample_gaussian(&[5, 6], &mut rng);
        let x = sample_gaussian(&[10, 6], &mut rng);
        let mut perm: Vec<usize> = (0..6).collect();
        rng.shuffle(&mut perm);
        let cfg = MetricConfig::wanda();
        let s = column_sensitivity(&w, &ActivationStats::from_inputs(&x).unwrap(), &cfg).unwrap();
        let sp = column_sensitivity(
            &w.select_columns(&perm),
            &ActivationStats::from_inputs(&x.select_columns(&perm)).unwrap(),
            &cfg,
        )
        .unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(sp[i], s[p]);
            assert!(sp[i] >= 0.0);
        }
    }

    #[test]
    fn metric_parses_from_preset_name_or_fields() {
        let owq: MetricConfig = serde_json::from_str(r#""owq""#).unwrap();
        assert_eq!(owq, MetricConfig::owq());
        let json = serde_json::to_string(&owq).unwrap();
        assert_eq!(serde_json::from_str::<MetricConfig>(&json).unwrap(), owq);
        assert!(serde_json::from_str::<MetricConfig>(r#""nope""#).is_err());
    }
}
