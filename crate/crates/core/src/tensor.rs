//! Dense row-major arrays, vector norms, top-k selection and the seeded
//! Gaussian sampler everything else builds on.
//!
//! All arithmetic is `f64`. Matrices follow the layer convention used across
//! the crate: rows are output channels, columns are input channels, so a
//! "column" of a weight matrix is the slice of weights reading one input
//! feature.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor from external data, rejecting NaN/Inf and a data
    /// length that disagrees with the shape.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(&[numel], &[data.len()]));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Row-major matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix literal");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[1]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.shape[1];
        self.data[row * cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[row * cols..(row + 1) * cols]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.get(r, col)).collect()
    }

    /// New matrix made of the listed columns, in the listed order.
    pub fn select_columns(&self, cols: &[usize]) -> Tensor {
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            let row = self.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Tensor {
            shape: vec![rows, cols.len()],
            data,
        }
    }

    /// Writes `src` (shape rows × cols.len()) into the listed columns.
    pub fn scatter_columns(&mut self, cols: &[usize], src: &Tensor) -> Result<()> {
        if src.shape() != [self.rows(), cols.len()] {
            return Err(Error::shape(&[self.rows(), cols.len()], src.shape()));
        }
        for r in 0..self.rows() {
            for (k, &c) in cols.iter().enumerate() {
                self.set(r, c, src.get(r, k));
            }
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    /// Little-endian bytes of every element, used for content hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormOrder {
    #[serde(rename = "1")]
    L1,
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    Inf,
}

impl std::str::FromStr for NormOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "l1" => Ok(NormOrder::L1),
            "2" | "l2" => Ok(NormOrder::L2),
            "inf" | "linf" | "∞" => Ok(NormOrder::Inf),
            other => Err(Error::InvalidConfig(format!("unknown norm order `{other}`"))),
        }
    }
}

pub fn norm(v: &[f64], order: NormOrder) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyNorm);
    }
    Ok(match order {
        NormOrder::L1 => v.iter().map(|x| x.abs()).sum(),
        NormOrder::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        NormOrder::Inf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
    })
}

/// Indices of the `k` largest scores, ties going to the smaller index,
/// returned in ascending index order.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::KExceedsColumns {
            k,
            len: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Seeded generator: ChaCha8 keyed by the 64-bit seed, with an optional
/// 64-bit stream id for independent sub-streams.
///
/// Gaussians come from the Box–Muller transform evaluated with `libm`, so the
/// bit pattern of every draw is fixed across platforms. Each transform
/// consumes two `u64` words and yields two normals; the second is kept for
/// the next call.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    draws: u64,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
            draws: 0,
            spare: None,
        }
    }

    /// Independent generator for sub-task `index`: same seed, stream
    /// `index + 1` (stream 0 belongs to the parent).
    pub fn derive(&self, index: u64) -> SeededRng {
        SeededRng::with_stream(self.seed, index + 1)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of `u64` words consumed so far.
    pub fn position(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // multiply-shift; bias is below 2^-40 for the sizes used here
        ((self.next_u64() >> 32) * n as u64 >> 32) as usize
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps ln finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * libm::sin(angle));
        radius * libm::cos(angle)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Tensor of i.i.d. standard normals. An empty shape leaves the generator
/// untouched.
pub fn sample_gaussian(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gaussian()).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn norm_examples() {
        for order in [NormOrder::L1, NormOrder::L2, NormOrder::Inf] {
            assert_eq!(norm(&[0.0, 0.0, 0.0], order).unwrap(), 0.0);
        }
        assert_eq!(norm(&[3.0, -4.0], NormOrder::L2).unwrap(), 5.0);
        assert_eq!(norm(&[1.0, -7.0, 2.0], NormOrder::Inf).unwrap(), 7.0);
        assert_eq!(norm(&[1.0, -7.0, 2.0], NormOrder::L1).unwrap(), 10.0);
        assert!(matches!(norm(&[], NormOrder::L2), Err(Error::EmptyNorm)));
    }

    #[test]
    fn top_k_ties_and_order() {
        assert_eq!(top_k_indices(&[1.0, 1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.1, 5.0, 3.0], 2).unwrap(), vec![1, 2]);
        assert!(matches!(
            top_k_indices(&[1.0], 2),
            Err(Error::KExceedsColumns { k: 2, len: 1 })
        ));
        assert!(top_k_indices(&[1.0, 2.0], 0).unwrap().is_empty());
    }

    #[test]
    fn top_k_matches_full_sort_oracle() {
        let mut rng = SeededRng::new(11);
        // coarse values so ties actually occur
        let scores: Vec<f64> = (0..1000).map(|_| (rng.uniform() * 200.0).floor()).collect();
        let got = top_k_indices(&scores, 128).unwrap();

        // oracle: repeatedly take the first maximum among the remaining
        let mut taken = vec![false; scores.len()];
        let mut expected = Vec::new();
        for _ in 0..128 {
            let mut best: Option<usize> = None;
            for (i, &s) in scores.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                if best.map_or(true, |b| s > scores[b]) {
                    best = Some(i);
                }
            }
            taken[best.unwrap()] = true;
            expected.push(best.unwrap());
        }
        expected.sort_unstable();
        assert_eq!(got, expected);
    }

    #[test]
    fn gaussian_is_reproducible() {
        let a = sample_gaussian(&[7, 3], &mut SeededRng::new(5));
        let b = sample_gaussian(&[7, 3], &mut SeededRng::new(5));
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());

        let mut x = SeededRng::new(99);
        let mut y = SeededRng::new(99);
        for _ in 0..100_000 {
            assert_eq!(x.gaussian().to_bits(), y.gaussian().to_bits());
        }
    }

    #[test]
    fn empty_sample_does_not_advance() {
        let mut rng = SeededRng::new(1);
        let t = sample_gaussian(&[0], &mut rng);
        assert!(t.is_empty());
        assert_eq!(rng.position(), 0);
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = SeededRng::new(2024);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn derived_streams_differ() {
        let base = SeededRng::new(3);
        let mut a = base.derive(0);
        let mut b = base.derive(1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn from_vec_validation() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::from_vec(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(1))
        ));
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1e3f64..1e3, 1..40)
    }

    proptest! {
        #[test]
        fn norm_is_homogeneous(v in vec_strategy(), c in 0.0f64..100.0) {
            for order in [NormOrder::L1, NormOrder::L2, NormOrder::Inf] {
                let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
                let lhs = norm(&scaled, order).unwrap();
                let rhs = c * norm(&v, order).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-300));
            }
        }

        #[test]
        fn norm_triangle(pair in (1usize..30).prop_flat_map(|n| (
            prop::collection::vec(-1e3f64..1e3, n),
            prop::collection::vec(-1e3f64..1e3, n),
        ))) {
            let (a, b) = pair;
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            for order in [NormOrder::L1, NormOrder::L2, NormOrder::Inf] {
                let lhs = norm(&sum, order).unwrap();
                let rhs = norm(&a, order).unwrap() + norm(&b, order).unwrap();
                prop_assert!(lhs <= rhs * (1.0 + 1e-12));
            }
        }
    }
}
