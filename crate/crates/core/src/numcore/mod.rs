//! Numeric bedrock: dense matrices, probability vectors, seeded RNG
//! streams, and the handful of stable scalar primitives (softmax,
//! log-sum-exp, KL, entropy, soft cross-entropy) everything else is built
//! from. Also home of the finite-difference gradient checker that keeps the
//! hand-derived backprop in the model and distillation code honest.

mod matrix;
mod prob;
mod rng;

pub use matrix::Matrix;
pub use prob::{ProbVector, PROB_SUM_TOL};
pub use rng::RngStream;

use crate::{Error, Result};

/// Numerically stable softmax.
///
/// Shifts by the max before exponentiating, so inputs up to ~1e4 in
/// magnitude cannot overflow, and adding a constant to every logit leaves
/// the output unchanged (up to ~1e-15 per entry).
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::domain("softmax of an empty logit vector".to_string()));
    }
    if let Some(bad) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::domain(format!(
            "softmax input {bad} is not finite: {}",
            logits[bad]
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbVector::new(exps.iter().map(|&e| e / sum).collect())
}

/// log Σ exp(xᵢ), computed with the max-shift identity.
pub fn log_sum_exp(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::domain("log-sum-exp of an empty vector".to_string()));
    }
    if let Some(bad) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::domain(format!(
            "log-sum-exp input {bad} is not finite: {}",
            logits[bad]
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    Ok(max + sum.ln())
}

/// KL divergence Σ pᵢ ln(pᵢ/qᵢ) in nats, with 0·ln 0 := 0.
///
/// A support violation (pᵢ > 0 where qᵢ = 0) is reported as
/// [`Error::InfiniteKl`] instead of returning +∞, so callers can decide
/// whether infinity is a fatal condition or a reportable sentinel.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::domain(format!(
            "KL divergence needs equal lengths, got {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut sum = 0.0;
    for i in 0..p.len() {
        let (pi, qi) = (p[i], q[i]);
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::InfiniteKl { index: i, p: pi });
        }
        sum += pi * (pi.ln() - qi.ln());
    }
    // Rounding can leave a ~1e-17 negative residue when p ≈ q; the true
    // value is never negative, so snap that residue to zero.
    if sum < 0.0 {
        if sum < -1e-9 {
            return Err(Error::numeric(format!(
                "KL divergence summed to {sum}, far below zero"
            )));
        }
        sum = 0.0;
    }
    Ok(sum)
}

/// Shannon entropy −Σ pᵢ ln pᵢ in nats, with 0·ln 0 := 0.
pub fn shannon_entropy(p: &ProbVector) -> f64 {
    let mut h = 0.0;
    for &pi in p.iter() {
        if pi > 0.0 {
            h -= pi * pi.ln();
        }
    }
    h.max(0.0)
}

/// Cross-entropy of soft `target` against `softmax(logits)`:
/// −Σ targetᵢ · log_softmax(logits)ᵢ = LSE(logits) − Σ targetᵢ · logitᵢ.
///
/// The log-sum-exp form never materialises log(0) even for extreme logits.
pub fn cross_entropy_soft(logits: &[f64], target: &ProbVector) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(Error::domain(format!(
            "cross-entropy needs equal lengths, got {} logits vs {} targets",
            logits.len(),
            target.len()
        )));
    }
    let lse = log_sum_exp(logits)?;
    let dot: f64 = logits.iter().zip(target.iter()).map(|(&z, &t)| t * z).sum();
    Ok(lse - dot)
}

/// Compares an analytic gradient against central finite differences.
///
/// Returns the worst per-coordinate relative error
/// |analytic − numeric| / max(|analytic|, |numeric|, 1e-8). A correct
/// gradient lands near the O(step²) truncation floor; a wrong one shows up
/// as an O(1) value, so the two regimes are unambiguous.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[f64],
    analytic_grad: &[f64],
    step: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic_grad.len() {
        return Err(Error::domain(format!(
            "gradient check needs equal lengths, got {} params vs {} gradient entries",
            params.len(),
            analytic_grad.len()
        )));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::domain(format!("finite-difference step must be positive, got {step}")));
    }
    let mut point = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let saved = point[i];
        point[i] = saved + step;
        let up = loss(&point);
        point[i] = saved - step;
        let down = loss(&point);
        point[i] = saved;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::domain(format!(
                "loss is not finite near parameter {i}: f(+) = {up}, f(-) = {down}"
            )));
        }
        let numeric = (up - down) / (2.0 * step);
        let analytic = analytic_grad[i];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}
