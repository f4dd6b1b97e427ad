//! Uniform symmetric round-to-nearest quantization with one step size per
//! output row.
//!
//! For bit-width `b` the integer grid is `[-2^(b-1), 2^(b-1) - 1]`, the zero
//! point is fixed at 0, and a row is stored as `W_int[i, :] = clamp(round(W[i, :] / Δ_i))`
//! and reconstructed as `Δ_i * W_int[i, :]`. `Δ_i = α_i / q_max`, where `α_i` is
//! picked by linear grid search over `max|W[i, :]| * g / G`, `g = 1..=G`.
//!
//! Rounding is half-to-even.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::archive::{DType, TensorArchive};
use crate::error::{Error, Result};
use crate::partition::SalientPartition;
use crate::tensor::Tensor;

/// Step size given to rows with no nonzero weight.
pub const DEGENERATE_DELTA: f64 = 1e-8;

pub const DEFAULT_GRID_POINTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct BitWidth(u32);

impl BitWidth {
    pub const SUPPORTED: [u32; 4] = [2, 3, 4, 8];

    pub fn new(bits: u32) -> Result<Self> {
        if Self::SUPPORTED.contains(&bits) {
            Ok(Self(bits))
        } else {
            Err(Error::InvalidConfig(format!(
                "bit-width {bits} not in {:?}",
                Self::SUPPORTED
            )))
        }
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn q_min(self) -> i32 {
        -(1 << (self.0 - 1))
    }

    pub fn q_max(self) -> i32 {
        (1 << (self.0 - 1)) - 1
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = Error;
    fn try_from(bits: u32) -> Result<Self> {
        BitWidth::new(bits)
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.0
    }
}

impl std::fmt::Display for BitWidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleObjective {
    /// `‖w − Q(w)‖²` over the row.
    WeightMse,
    /// `‖(w − Q(w)) Xᵀ‖²` with calibration inputs `X` (tokens × columns).
    OutputMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: BitWidth,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_objective")]
    pub objective: ScaleObjective,
}

fn default_grid_points() -> usize {
    DEFAULT_GRID_POINTS
}

fn default_objective() -> ScaleObjective {
    ScaleObjective::WeightMse
}

impl QuantSpec {
    pub fn new(bits: BitWidth) -> Self {
        Self {
            bits,
            grid_points: DEFAULT_GRID_POINTS,
            objective: ScaleObjective::WeightMse,
        }
    }

    pub fn with_grid_points(mut self, grid_points: usize) -> Self {
        self.grid_points = grid_points;
        self
    }
}

/// Integer matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i32>,
}

impl IntMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<i32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(&[rows, cols], &[data.len()]));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[i32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

fn check_scale(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::BadScale(delta))
    }
}

#[inline]
fn quantize_value(w: f64, delta: f64, bits: BitWidth) -> i32 {
    let q = (w / delta).round_ties_even();
    q.clamp(bits.q_min() as f64, bits.q_max() as f64) as i32
}

pub fn quantize_row(w_row: &[f64], delta: f64, bits: BitWidth) -> Result<Vec<i32>> {
    check_scale(delta)?;
    Ok(w_row.iter().map(|&w| quantize_value(w, delta, bits)).collect())
}

/// `Δ_i · round-trip(w)` for each entry, without materializing the integers.
pub fn fake_quantize_row(w_row: &[f64], delta: f64, bits: BitWidth) -> Result<Vec<f64>> {
    check_scale(delta)?;
    Ok(w_row
        .iter()
        .map(|&w| delta * quantize_value(w, delta, bits) as f64)
        .collect())
}

pub fn dequantize(w_int: &IntMatrix, delta: &[f64]) -> Result<Tensor> {
    if w_int.rows() != delta.len() {
        return Err(Error::shape(&[w_int.rows()], &[delta.len()]));
    }
    let mut data = Vec::with_capacity(w_int.data.len());
    for (r, &d) in delta.iter().enumerate() {
        data.extend(w_int.row(r).iter().map(|&q| d * q as f64));
    }
    Tensor::from_vec(vec![w_int.rows(), w_int.cols()], data)
}

/// Result of the per-row step-size search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSearch {
    pub alpha: f64,
    pub delta: f64,
    /// Objective value at the chosen candidate.
    pub error: f64,
    /// Row had no nonzero weight; `delta` is [`DEGENERATE_DELTA`].
    pub degenerate: bool,
}

fn degenerate(bits: BitWidth) -> ScaleSearch {
    ScaleSearch {
        alpha: DEGENERATE_DELTA * bits.q_max() as f64,
        delta: DEGENERATE_DELTA,
        error: 0.0,
        degenerate: true,
    }
}

/// Candidate clipping ranges `max|w| · g / grid_points` for `g = 1..=grid_points`.
pub fn scale_candidates(max_abs: f64, grid_points: usize) -> impl Iterator<Item = f64> {
    (1..=grid_points).map(move |g| max_abs * g as f64 / grid_points as f64)
}

pub fn row_weight_error(w_row: &[f64], delta: f64, bits: BitWidth) -> f64 {
    w_row
        .iter()
        .map(|&w| {
            let e = w - delta * quantize_value(w, delta, bits) as f64;
            e * e
        })
        .sum()
}

/// `Σ_t (Σ_j e_j x_tj)²` where `e = w − Q(w)` and `x` is tokens × row-length.
pub fn row_output_error(w_row: &[f64], delta: f64, bits: BitWidth, inputs: &Tensor) -> f64 {
    let err: Vec<f64> = w_row
        .iter()
        .map(|&w| w - delta * quantize_value(w, delta, bits) as f64)
        .collect();
    (0..inputs.rows())
        .map(|t| {
            let y: f64 = inputs.row(t).iter().zip(&err).map(|(x, e)| x * e).sum();
            y * y
        })
        .sum()
}

fn search(
    w_row: &[f64],
    bits: BitWidth,
    grid_points: usize,
    objective: impl Fn(f64) -> f64,
) -> Result<ScaleSearch> {
    if grid_points < 2 {
        return Err(Error::InvalidConfig(format!(
            "grid_points must be at least 2, got {grid_points}"
        )));
    }
    let max_abs = w_row.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max_abs == 0.0 {
        return Ok(degenerate(bits));
    }
    let q_max = bits.q_max() as f64;
    let mut best: Option<ScaleSearch> = None;
    for alpha in scale_candidates(max_abs, grid_points) {
        let delta = alpha / q_max;
        let error = objective(delta);
        // strict comparison keeps the smallest alpha on ties
        if best.map_or(true, |b| error < b.error) {
            best = Some(ScaleSearch {
                alpha,
                delta,
                error,
                degenerate: false,
            });
        }
    }
    Ok(best.expect("grid has at least two candidates"))
}

/// Grid search for `α` minimizing the row's weight reconstruction error.
pub fn search_scale(w_row: &[f64], bits: BitWidth, grid_points: usize) -> Result<ScaleSearch> {
    search(w_row, bits, grid_points, |d| row_weight_error(w_row, d, bits))
}

/// Grid search minimizing the row's output error on calibration inputs
/// (`inputs` is tokens × `w_row.len()`).
pub fn search_scale_output(
    w_row: &[f64],
    bits: BitWidth,
    grid_points: usize,
    inputs: &Tensor,
) -> Result<ScaleSearch> {
    if inputs.cols() != w_row.len() {
        return Err(Error::shape(&[inputs.rows(), w_row.len()], inputs.shape()));
    }
    search(w_row, bits, grid_points, |d| {
        row_output_error(w_row, d, bits, inputs)
    })
}

/// Per-row scales for the given columns of `w`.
///
/// `inputs`, when the objective is [`ScaleObjective::OutputMse`], holds the
/// calibration inputs for all `w.cols()` columns.
pub fn search_row_scales(
    w: &Tensor,
    cols: &[usize],
    spec: &QuantSpec,
    inputs: Option<&Tensor>,
) -> Result<Vec<ScaleSearch>> {
    let sub = w.select_columns(cols);
    let sub_inputs = match spec.objective {
        ScaleObjective::WeightMse => None,
        ScaleObjective::OutputMse => {
            let x = inputs.ok_or_else(|| {
                Error::InvalidConfig("output-error scale search needs calibration inputs".into())
            })?;
            if x.cols() != w.cols() {
                return Err(Error::shape(&[x.rows(), w.cols()], x.shape()));
            }
            Some(x.select_columns(cols))
        }
    };
    (0..sub.rows())
        .map(|r| {
            let row = sub.row(r);
            let found = match &sub_inputs {
                None => search_scale(row, spec.bits, spec.grid_points),
                Some(x) =>search_scale_output(row, spec.bits, spec.grid_points, x),
            }?;
            if found.degenerate && !row.is_empty() {
                tracing::warn!(row = r, "degenerate-row: all-zero row, using Δ = {DEGENERATE_DELTA:e}");
            }
            Ok(found)
        })
        .collect()
}

/// Whole-matrix round trip `diag(Δ) W_int` with freshly searched row scales.
pub fn quantize_dequantize(w: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    let cols: Vec<usize> = (0..w.cols()).collect();
    let scales = search_row_scales(w, &cols, spec, None)?;
    let mut out = w.clone();
    for (r, s) in scales.iter().enumerate() {
        let q = fake_quantize_row(w.row(r), s.delta, spec.bits)?;
        out.row_mut(r).copy_from_slice(&q);
    }
    Ok(out)
}

/// Mixed-precision layout: integer codes for non-salient columns, the salient
/// columns untouched in full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub w_int: IntMatrix,
    pub delta: Vec<f64>,
    pub salient_fp: Tensor,
    pub partition: SalientPartition,
    pub bits: BitWidth,
    /// Rows that fell back to [`DEGENERATE_DELTA`].
    pub degenerate_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedLayerMeta {
    pub bits: BitWidth,
    pub partition: SalientPartition,
    pub degenerate_rows: Vec<usize>,
}

pub fn quantize_layer(
    w: &Tensor,
    partition: &SalientPartition,
    spec: &QuantSpec,
) -> Result<QuantizedLayer> {
    quantize_layer_with_inputs(w, partition, spec, None)
}

pub fn quantize_layer_with_inputs(
    w: &Tensor,
    partition: &SalientPartition,
    spec: &QuantSpec,
    inputs: Option<&Tensor>,
) -> Result<QuantizedLayer> {
    if !w.is_matrix() || partition.width() != w.cols() {
        return Err(Error::shape(&[w.shape().first().copied().unwrap_or(0), partition.width()], w.shape()));
    }
    let frozen = partition.non_salient();
    let scales = search_row_scales(w, frozen, spec, inputs)?;
    let sub = w.select_columns(frozen);
    let mut codes = Vec::with_capacity(sub.len());
    for (r, s) in scales.iter().enumerate() {
        codes.extend(quantize_row(sub.row(r), s.delta, spec.bits)?);
    }
    let degenerate_rows = scales
        .iter()
        .enumerate()
        .filter(|(_, s)| s.degenerate)
        .map(|(r, _)| r)
        .collect();
    Ok(QuantizedLayer {
        w_int: IntMatrix::from_vec(w.rows(), frozen.len(), codes)?,
        delta: scales.iter().map(|s| s.delta).collect(),
        salient_fp: w.select_columns(partition.salient()),
        partition: partition.clone(),
        bits: spec.bits,
        degenerate_rows,
    })
}

impl QuantizedLayer {
    /// Full-width matrix: dequantized codes in non-salient columns, the
    /// stored full-precision values in salient ones.
    pub fn reconstruct(&self) -> Result<Tensor> {
        let rows = self.delta.len();
        let mut out = Tensor::zeros(&[rows, self.partition.width()]);
        out.scatter_columns(self.partition.non_salient(), &dequantize(&self.w_int, &self.delta)?)?;
        out.scatter_columns(self.partition.salient(), &self.salient_fp)?;
        Ok(out)
    }

    /// Replaces the full-precision salient block, e.g. after fine-tuning.
    pub fn with_salient(&self, w: &Tensor) -> Result<QuantizedLayer> {
        let salient_fp = w.select_columns(self.partition.salient());
        if salient_fp.shape() != self.salient_fp.shape() {
            return Err(Error::shape(self.salient_fp.shape(), salient_fp.shape()));
        }
        Ok(QuantizedLayer {
            salient_fp,
            ..self.clone()
        })
    }

    /// Adds `<name>.w_int` (integer codes stored exactly as `f32`),
    /// `<name>.delta` and `<name>.salient_fp` to the archive.
    pub fn write_into(&self, name: &str, archive: &mut TensorArchive) -> Result<()> {
        let codes = self.w_int.data().iter().map(|&q| q as f64).collect();
        archive.insert(
            format!("{name}.w_int"),
            DType::F32,
            Tensor::from_vec(vec![self.w_int.rows(), self.w_int.cols()], codes)?,
        );
        archive.insert(format!("{name}.delta"), DType::F64, Tensor::vector(&self.delta));
        archive.insert(format!("{name}.salient_fp"), DType::F64, self.salient_fp.clone());
        Ok(())
    }

    pub fn meta(&self) -> QuantizedLayerMeta {
        QuantizedLayerMeta {
            bits: self.bits,
            partition: self.partition.clone(),
            degenerate_rows: self.degenerate_rows.clone(),
        }
    }

    pub fn read_from(name: &str, archive: &TensorArchive, meta: &QuantizedLayerMeta) -> Result<Self> {
        let fetch = |suffix: &str| {
            let key = format!("{name}.{suffix}");
            archive.get(&key).cloned().ok_or(Error::UnknownTensor(key))
        };
        let codes = fetch("w_int")?;
        let w_int = IntMatrix::from_vec(
            codes.shape()[0],
            codes.shape()[1],
            codes.data().iter().map(|&v| v as i32).collect(),
        )?;
        Ok(QuantizedLayer {
            w_int,
            delta: fetch("delta")?.into_data(),
            salient_fp: fetch("salient_fp")?,
            partition: meta.partition.clone(),
            bits: meta.bits,
            degenerate_rows: meta.degenerate_rows.clone(),
        })
    }
}

/// Writes a set of quantized layers as an archive plus a JSON sidecar
/// `{layer: {bits, partition: {width, salient}, degenerate_rows}}`.
pub fn save_quantized(
    layers: &BTreeMap<String, QuantizedLayer>,
    archive_path: &std::path::Path,
    sidecar_path: &std::path::Path,
) -> Result<()> {
    let mut archive = TensorArchive::new();
    let mut meta = BTreeMap::new();
    for (name, layer) in layers {
        layer.write_into(name, &mut archive)?;
        meta.insert(name.clone(), layer.meta());
    }
    archive.save(archive_path)?;
    let json = serde_json::to_vec_pretty(&meta)?;
    std::fs::write(sidecar_path, json).map_err(|e| Error::io(sidecar_path, e))
}

pub fn load_quantized(
    archive_path: &std::path::Path,
    sidecar_path: &std::path::Path,
) -> Result<BTreeMap<String, QuantizedLayer>> {
    let archive = TensorArchive::load(archive_path)?;
    let raw = std::fs::read(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    let meta: BTreeMap<String, QuantizedLayerMeta> = serde_json::from_slice(&raw)?;
    meta.iter()
        .map(|(name, m)| Ok((name.clone(), QuantizedLayer::read_from(name, &archive, m)?)))
        .collect()
}

/// Squared Frobenius distance.
pub fn quant_error(w: &Tensor, w_hat: &Tensor) -> Result<f64> {
    if w.shape() != w_hat.shape() {
        return Err(Error::shape(w.shape(), w_hat.shape()));
    }
    Ok(w
        .data()
        .iter()
        .zip(w_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}
