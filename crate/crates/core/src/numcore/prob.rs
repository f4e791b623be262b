use crate::{Error, Result};

/// Tolerance on `sum == 1` for a well-formed probability vector.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// A discrete probability distribution: non-negative `f64` entries that sum
/// to one within [`PROB_SUM_TOL`].
///
/// Construction always validates, so downstream KL/entropy code can assume
/// the invariants instead of re-checking them in every loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates and wraps `values`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("probability vector must be non-empty".to_string()));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 || v > 1.0 + PROB_SUM_TOL {
                return Err(Error::domain(format!(
                    "probability entry {i} out of range [0, 1]: {v}"
                )));
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::domain(format!(
                "probability vector sums to {sum}, expected 1 within {PROB_SUM_TOL}"
            )));
        }
        Ok(ProbVector(values))
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn normalize(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::domain("cannot normalize an empty weight vector".to_string()));
        }
        let mut sum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::domain(format!(
                    "weight {i} must be finite and non-negative, got {w}"
                )));
            }
            sum += w;
        }
        if sum <= 0.0 {
            return Err(Error::domain("weights sum to zero, cannot normalize".to_string()));
        }
        Ok(ProbVector(weights.iter().map(|&w| w / sum).collect()))
    }

    /// The uniform distribution over `k` outcomes.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::domain("uniform distribution needs at least one outcome".to_string()));
        }
        Ok(ProbVector(vec![1.0 / k as f64; k]))
    }

    /// Point mass on `index` out of `k` outcomes.
    pub fn one_hot(index: usize, k: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::domain(format!("one-hot index {index} out of range for {k} classes")));
        }
        let mut v = vec![0.0; k];
        v[index] = 1.0;
        Ok(ProbVector(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false // non-empty by construction
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; first index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}
