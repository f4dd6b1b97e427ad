//! Quantization-scaled Gaussian noise for non-salient columns.
//!
//! For row `i` the step `Δ_i` is searched on the non-salient part of the row
//! only, and every non-salient entry receives `½ Δ_i ω` with `ω ~ N(0, 1)`
//! drawn fresh on each call. Salient columns are copied through untouched.
//!
//! Per-layer noise streams: layer number `n` in sorted eligible-name order
//! draws from `SeededRng::with_stream(seed, n + 1)`, so the result does not
//! depend on the order layers are visited.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::partition::SalientPartition;
use crate::quantizer::{search_row_scales, BitWidth, QuantSpec};
use crate::tensor::{SeededRng, Tensor};

/// `Δ_i = α_i / (2^(b-1) - 1)` from a grid search restricted to the
/// non-salient columns of each row.
pub fn compute_noise_scale(
    w: &Tensor,
    partition: &SalientPartition,
    bits: BitWidth,
    grid_points: usize,
    layer: &str,
) -> Result<Vec<f64>> {
    if partition.width() != w.cols() {
        return Err(Error::shape(&[w.rows(), partition.width()], w.shape()));
    }
    if partition.non_salient().is_empty() {
        return Err(Error::NothingToPerturb(layer.to_string()));
    }
    let spec = QuantSpec::new(bits).with_grid_points(grid_points);
    Ok(search_row_scales(w, partition.non_salient(), &spec, None)?
        .into_iter()
        .map(|s| s.delta)
        .collect())
}

/// Perturbed copy of `w`: salient columns bit-identical, non-salient entry
/// `(i, j)` shifted by `0.5 · delta[i] · ω`. Draws row by row, columns
/// ascending.
pub fn inject(w: &Tensor, partition: &SalientPartition, delta: &[f64], rng: &mut SeededRng) -> Result<Tensor> {
    if partition.width() != w.cols() || delta.len() != w.rows() {
        return Err(Error::shape(&[delta.len(), partition.width()], w.shape()));
    }
    let mut out = w.clone();
    for (r, &d) in delta.iter().enumerate() {
        let row = out.row_mut(r);
        for &c in partition.non_salient() {
            row[c] += 0.5 * d * rng.gaussian();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNoise {
    pub delta: Vec<f64>,
    pub bits: BitWidth,
}

/// Noise scales for every perturbable layer, fixed before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub layers: BTreeMap<String, LayerNoise>,
    pub bits: BitWidth,
    pub enabled: bool,
}

impl NoisePlan {
    /// Computes scales for every partitioned layer that has at least one
    /// non-salient column; fully salient layers get no entry.
    pub fn build(
        params: &ParamSet,
        partitions: &BTreeMap<String, SalientPartition>,
        bits: BitWidth,
        grid_points: usize,
    ) -> Result<NoisePlan> {
        let mut layers = BTreeMap::new();
        for (name, partition) in partitions {
            if partition.non_salient().is_empty() {
                continue;
            }
            let delta = compute_noise_scale(params.get(name)?, partition, bits, grid_points, name)?;
            layers.insert(name.clone(), LayerNoise { delta, bits });
        }
        Ok(NoisePlan {
            layers,
            bits,
            enabled: true,
        })
    }

    pub fn disabled(bits: BitWidth) -> NoisePlan {
        NoisePlan {
            layers: BTreeMap::new(),
            bits,
            enabled: false,
        }
    }

    /// `{layer: {delta, bits}}` as stored in run manifests.
    pub fn manifest_entry(&self) -> serde_json::Value {
        serde_json::to_value(&self.layers).expect("plan serializes")
    }
}

/// One generator per eligible layer, derived from the run seed.
#[derive(Debug, Clone)]
pub struct NoiseStreams {
    streams: BTreeMap<String, SeededRng>,
}

impl NoiseStreams {
    pub fn new(seed: u64, eligible: &[String]) -> Self {
        let mut names = eligible.to_vec();
        names.sort();
        let streams = names
            .into_iter()
            .enumerate()
            .map(|(n, name)| (name, SeededRng::with_stream(seed, n as u64 + 1)))
            .collect();
        Self { streams }
    }

    pub fn get_mut(&mut self, layer: &str) -> Result<&mut SeededRng> {
        self.streams
            .get_mut(layer)
            .ok_or_else(|| Error::UnknownTensor(layer.to_string()))
    }
}

/// Parameters with noise injected into every layer the plan covers. Returns
/// the clean parameters unchanged when the plan is disabled.
pub fn inject_params(
    params: &ParamSet,
    partitions: &BTreeMap<String, SalientPartition>,
    plan: &NoisePlan,
    streams: &mut NoiseStreams,
) -> Result<ParamSet> {
    let mut noisy = params.clone();
    if !plan.enabled {
        return Ok(noisy);
    }
    for (name, layer) in &plan.layers {
        let partition = partitions
            .get(name)
            .ok_or_else(|| Error::MissingPartition(name.clone()))?;
        let w = inject(params.get(name)?, partition, &layer.delta, streams.get_mut(name)?)?;
        noisy.set(name, w)?;
    }
    Ok(noisy)
}
