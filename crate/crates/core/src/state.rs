//! Latent states, particle clouds, decoded answers and weight arithmetic.
//!
//! Tensors of shape `L x D` are stored as flat row-major vectors; every norm
//! in this crate is the Euclidean norm of that flat vector.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the simplex sum of a [`WeightVector`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-12;

/// A real `L x D` tensor stored as a flat vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTensor {
    values: Vec<f64>,
    rows: usize,
    dim: usize,
}

impl LatentTensor {
    /// Builds a tensor, checking the length and that every entry is finite.
    pub fn new(values: Vec<f64>, rows: usize, dim: usize) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::config("latent shape must be positive"));
        }
        if values.len() != rows * dim {
            return Err(Error::DimensionMismatch {
                expected: (rows, dim),
                actual: (values.len(), 1),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { values, rows, dim })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            values: vec![0.0; rows * dim],
            rows,
            dim,
        }
    }

    /// Unit vector along flat coordinate `index`.
    pub fn basis(rows: usize, dim: usize, index: usize) -> Self {
        let mut t = Self::zeros(rows, dim);
        t.values[index] = 1.0;
        t
    }

    /// Wraps backbone output without the finiteness check. Recursion drivers
    /// call [`LatentTensor::is_finite`] on everything they produce.
    pub(crate) fn from_raw(values: Vec<f64>, rows: usize, dim: usize) -> Self {
        debug_assert_eq!(values.len(), rows * dim);
        Self { values, rows, dim }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.dim)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    /// `self + c * other`
    pub fn add_scaled(&self, c: f64, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + c * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.values.iter().map(|&v| f(v)).collect(), self.rows, self.dim)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "latent shapes differ");
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_raw(values, self.rows, self.dim)
    }

    /// Euclidean distance between two tensors of equal shape.
    pub fn distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// The joint state `h = (y, z)`: answer latent and reasoning latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub y: LatentTensor,
    pub z: LatentTensor,
}

impl JointState {
    pub fn new(y: LatentTensor, z: LatentTensor) -> Result<Self> {
        if y.shape() != z.shape() {
            return Err(Error::DimensionMismatch {
                expected: y.shape(),
                actual: z.shape(),
            });
        }
        Ok(Self { y, z })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            y: LatentTensor::zeros(rows, dim),
            z: LatentTensor::zeros(rows, dim),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.y.shape()
    }
}

/// Normalized particle weights on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn uniform(len: usize) -> Self {
        assert!(len > 0, "weight vector needs at least one entry");
        Self(vec![1.0 / len as f64; len])
    }

    /// Validates an already-normalized vector.
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::DegenerateWeights("empty weight vector".into()));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::DegenerateWeights(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::DegenerateWeights(format!(
                "weights sum to {total}, not 1"
            )));
        }
        Ok(Self(w))
    }

    /// Normalizes log-weights with log-sum-exp.
    pub fn from_log_weights(log_w: &[f64]) -> Result<Self> {
        let normalized = normalize_log_weights(log_w)?;
        Ok(Self(normalized.iter().map(|l| l.exp()).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Effective sample size `1 / sum(w^2)`.
    pub fn ess(&self) -> f64 {
        ess(self)
    }
}

/// Normalizes a non-negative vector onto the simplex, preserving order.
pub fn normalize_weights(raw: &[f64]) -> Result<WeightVector> {
    if raw.is_empty() {
        return Err(Error::DegenerateWeights("empty weight vector".into()));
    }
    if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::DegenerateWeights(
            "raw weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::DegenerateWeights("raw weights sum to zero".into()));
    }
    Ok(WeightVector(raw.iter().map(|v| v / total).collect()))
}

/// Subtracts the log-sum-exp so that `exp` of the result sums to one.
pub fn normalize_log_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    if log_w.is_empty() {
        return Err(Error::DegenerateWeights("empty weight vector".into()));
    }
    if log_w.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::DegenerateWeights("log-weight is NaN or +inf".into()));
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights("all log-weights are -inf".into()));
    }
    let shifted: Vec<f64> = log_w.iter().map(|l| l - max).collect();
    let log_total = shifted.iter().map(|l| l.exp()).sum::<f64>().ln();
    Ok(shifted.into_iter().map(|l| l - log_total).collect())
}

/// Effective sample size `(sum_s w_s^2)^-1`, in `[1, S]`.
pub fn ess(weights: &WeightVector) -> f64 {
    let s = weights.len() as f64;
    let sum_sq: f64 = weights.0.iter().map(|w| w * w).sum();
    (1.0 / sum_sq).clamp(1.0, s)
}

/// Weighted particle approximation of the guided law at one outer step.
#[derive(Clone, Debug)]
pub struct ParticleCloud {
    pub particles: Vec<JointState>,
    pub weights: WeightVector,
    pub step: usize,
}

impl ParticleCloud {
    pub fn new(particles: Vec<JointState>, weights: WeightVector, step: usize) -> Result<Self> {
        if particles.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: (weights.len(), 1),
                actual: (particles.len(), 1),
            });
        }
        Ok(Self {
            particles,
            weights,
            step,
        })
    }

    /// `S` copies of `h0` with uniform weights.
    pub fn replicate(h0: &JointState, particles: usize) -> Self {
        Self {
            particles: vec![h0.clone(); particles],
            weights: WeightVector::uniform(particles),
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }
}

const TOKEN_ALPHABET: &[u8] = b"123456789abcdefghijklmnopqrstuvwxyz";

/// A decoded answer: `L` tokens, each in `1..=C`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenGrid {
    tokens: Vec<u32>,
    classes: u32,
}

impl TokenGrid {
    pub fn new(tokens: Vec<u32>, classes: u32) -> Result<Self> {
        if classes == 0 {
            return Err(Error::config("class count must be positive"));
        }
        if let Some(t) = tokens.iter().find(|&&t| t == 0 || t > classes) {
            return Err(Error::config(format!(
                "token {t} outside 1..={classes}"
            )));
        }
        Ok(Self { tokens, classes })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn classes(&self) -> u32 {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Fraction of positions agreeing with `other`.
    pub fn fraction_equal(&self, other: &TokenGrid) -> f64 {
        if self.tokens.is_empty() {
            return 1.0;
        }
        let hits = self
            .tokens
            .iter()
            .zip(&other.tokens)
            .filter(|(a, b)| a == b)
            .count();
        hits as f64 / self.tokens.len() as f64
    }

    /// Compact text form: one character per token for `C <= 35`, otherwise
    /// dot-separated decimals.
    pub fn to_token_string(&self) -> String {
        if self.classes as usize <= TOKEN_ALPHABET.len() {
            self.tokens
                .iter()
                .map(|&t| TOKEN_ALPHABET[t as usize - 1] as char)
                .collect()
        } else {
            self.tokens
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(".")
        }
    }

    /// Inverse of [`TokenGrid::to_token_string`].
    pub fn parse_token_string(s: &str, classes: u32) -> Result<Self> {
        let tokens = if classes as usize <= TOKEN_ALPHABET.len() {
            s.bytes()
                .map(|b| {
                    TOKEN_ALPHABET
                        .iter()
                        .position(|&a| a == b)
                        .map(|p| p as u32 + 1)
                        .ok_or_else(|| Error::parse(format!("bad token character {:?}", b as char)))
                })
                .collect::<Result<Vec<_>>>()?
        } else if s.is_empty() {
            Vec::new()
        } else {
            s.split('.')
                .map(|p| {
                    p.parse::<u32>()
                        .map_err(|e| Error::parse(format!("bad token {p:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?
        };
        TokenGrid::new(tokens, classes).map_err(|e| Error::parse(e.to_string()))
    }
}

impl fmt::Display for TokenGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_token_string())
    }
}

/// Per-row argmax over the first `C` features of `y`; ties go to the lowest
/// class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgmaxDecoder {
    classes: u32,
}

impl ArgmaxDecoder {
    pub fn new(classes: u32, dim: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::config("decoder needs at least one class"));
        }
        if classes as usize > dim {
            return Err(Error::config(format!(
                "argmax decoder with C = {classes} exceeds feature dimension D = {dim}"
            )));
        }
        Ok(Self { classes })
    }

    pub fn classes(&self) -> u32 {
        self.classes
    }

    pub fn decode(&self, state: &JointState) -> TokenGrid {
        self.decode_latent(&state.y)
    }

    pub fn decode_latent(&self, y: &LatentTensor) -> TokenGrid {
        let c = self.classes as usize;
        let tokens = (0..y.rows())
            .map(|i| {
                let row = &y.row(i)[..c];
                let mut best = 0;
                for (k, &v) in row.iter().enumerate().skip(1) {
                    // strict comparison keeps the lowest index on ties
                    if v > row[best] {
                        best = k;
                    }
                }
                best as u32 + 1
            })
            .collect();
        TokenGrid {
            tokens,
            classes: self.classes,
        }
    }
}

/// Decodes `state` with `decoder`.
pub fn decode(state: &JointState, decoder: &ArgmaxDecoder) -> TokenGrid {
    decoder.decode(state)
}
