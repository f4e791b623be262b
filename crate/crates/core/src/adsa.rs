//! Prior-compensating soft-label calibration.
//!
//! A teacher trained on imbalanced data bakes its class prior into every
//! soft label. Calibration subtracts a multiple of the log-prior from each
//! logit before the softmax,
//!
//! `p(y | x; τ) = softmax_y( f_y(x) − τ · ln π_y )`,
//!
//! and picks the strength `τ*` that makes the distilled set's class-wise
//! mean confidences as equal as possible (their population standard
//! deviation is the objective). The distilled set itself serves as the
//! hold-out for this search; no test data is consulted.
//!
//! The search is an exhaustive grid pass (default 0..=3 in steps of 0.01)
//! followed by one golden-section refinement inside ±1 grid step of the
//! grid argmin. Ties always resolve toward the smallest τ, so parallel or
//! reordered evaluation cannot change the answer.

use crate::longtail::ClassPrior;
use crate::numcore::{softmax, Matrix};
use crate::softlabel::{ProbRows, SoftLabelSet};
use crate::{Error, Result};

/// Search range for the calibration strength.
#[derive(Debug, Clone, PartialEq)]
pub struct TauGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl TauGrid {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(lo >= 0.0 && lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::domain(format!(
                "tau grid needs 0 <= lo < hi, got [{lo}, {hi}]"
            )));
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::domain(format!("tau grid step must be positive, got {step}")));
        }
        Ok(TauGrid { lo, hi, step })
    }

    /// The published default: 301 points over [0, 3].
    pub fn default_range() -> Self {
        TauGrid { lo: 0.0, hi: 3.0, step: 0.01 }
    }

    /// Grid points `lo + i·step`, capped at `hi` (which is always
    /// included).
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step).round() as usize;
        let mut pts: Vec<f64> = (0..=n).map(|i| self.lo + i as f64 * self.step).collect();
        if let Some(last) = pts.last_mut() {
            if *last > self.hi {
                *last = self.hi;
            }
        }
        pts
    }
}

/// Outcome of the τ search.
#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub tau_star: f64,
    /// Objective at `tau_star`; equals the minimum over `objective_trace`.
    pub objective_value: f64,
    /// Every evaluated (τ, objective) pair — grid plus refinement —
    /// sorted by τ.
    pub objective_trace: Vec<(f64, f64)>,
    /// Class-wise mean confidence before calibration (τ = 0).
    pub per_class_mean_confidence_pre: Vec<f64>,
    /// Class-wise mean confidence at `tau_star`.
    pub per_class_mean_confidence_post: Vec<f64>,
    /// Objective at the τ = 0 baseline (recorded even when 0 is outside
    /// the grid).
    pub baseline_objective: f64,
    /// True when the argmin sits at the grid's low end and the trace is
    /// flat — calibration has nothing to do (e.g. uniform prior).
    pub calibration_inert: bool,
}

/// Soft labels after calibration: probability rows per label slice.
#[derive(Debug, Clone)]
pub struct CalibratedLabelSet {
    pub slices: Vec<ProbRows>,
    pub tau: f64,
}

impl CalibratedLabelSet {
    /// f32 matrices for the training loop (one per label slice).
    pub fn to_matrices(&self) -> Result<Vec<Matrix>> {
        self.slices
            .iter()
            .map(|rows| {
                let m = rows.len();
                let k = rows[0].len();
                let mut data = Vec::with_capacity(m * k);
                for row in rows {
                    data.extend(row.iter().map(|&p| p as f32));
                }
                Matrix::from_vec(m, k, data)
            })
            .collect()
    }
}

/// Applies the prior adjustment at strength `tau` to every row.
///
/// `tau = 0` reproduces the plain softmax bit-for-bit, and a uniform prior
/// makes the adjustment a constant shift that softmax ignores.
pub fn calibrate_logits(logits: &Matrix, prior: &ClassPrior, tau: f64) -> Result<ProbRows> {
    if logits.cols() != prior.num_classes() {
        return Err(Error::domain(format!(
            "logits have {} classes, prior has {}",
            logits.cols(),
            prior.num_classes()
        )));
    }
    if !tau.is_finite() {
        return Err(Error::domain(format!("tau must be finite, got {tau}")));
    }
    let mut log_prior: Vec<f64> = (0..prior.num_classes())
        .map(|k| prior.log_frequency(k))
        .collect();
    if log_prior.iter().any(|lp| !lp.is_finite()) {
        return Err(Error::domain(
            "prior has a zero entry; its logarithm is not finite".to_string(),
        ));
    }
    // Center the log-prior. Softmax ignores constant shifts, so this is
    // mathematically free — but it makes a uniform prior a *bitwise* no-op
    // at every strength, which keeps flat objective traces exactly tied
    // and the smallest-τ tie-break deterministic.
    let mean_lp = log_prior.iter().sum::<f64>() / log_prior.len() as f64;
    for lp in &mut log_prior {
        *lp -= mean_lp;
    }
    (0..logits.rows())
        .map(|i| {
            let mut row = logits.row_f64(i);
            if tau != 0.0 {
                for (z, lp) in row.iter_mut().zip(&log_prior) {
                    *z -= tau * lp;
                }
            }
            softmax(&row)
        })
        .collect()
}

/// Mean confidence the rows assign to their own class: entry `i` averages
/// `probs[m][i]` over the items labeled `i`.
pub fn class_mean_confidence(
    probs: &ProbRows,
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<f64>> {
    if probs.len() != labels.len() {
        return Err(Error::domain(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut sums = vec![0.0f64; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (row, &y) in probs.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::domain(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        if row.len() != num_classes {
            return Err(Error::domain(format!(
                "probability row has {} classes, expected {num_classes}",
                row.len()
            )));
        }
        sums[y] += row[y];
        counts[y] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::capacity(format!(
            "class {k} has no items; its mean confidence is undefined"
        )));
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| s / c as f64)
        .collect())
}

/// Population standard deviation of a vector: √(1/K · Σ (c_i − c̄)²).
fn population_std(values: &[f64]) -> f64 {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    var.sqrt()
}

/// Class-confidence spread of the labels at strength `tau`, averaged over
/// all slices: zero exactly when every class is, on average, equally
/// confident about itself.
fn objective_over_slices(
    slices: &[Matrix],
    labels: &[usize],
    prior: &ClassPrior,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    let k = prior.num_classes();
    let mut conf = vec![0.0f64; k];
    for slice in slices {
        let probs = calibrate_logits(slice, prior, tau)?;
        let per_slice = class_mean_confidence(&probs, labels, k)?;
        for (acc, c) in conf.iter_mut().zip(per_slice) {
            *acc += c / slices.len() as f64;
        }
    }
    Ok((population_std(&conf), conf))
}

/// Spread objective for a single logit matrix at one strength.
pub fn adsa_objective(
    logits: &Matrix,
    labels: &[usize],
    prior: &ClassPrior,
    tau: f64,
) -> Result<f64> {
    objective_over_slices(std::slice::from_ref(logits), labels, prior, tau).map(|(o, _)| o)
}

/// Full τ search over one logit matrix. See [`optimize_tau_multi`].
pub fn optimize_tau(
    logits: &Matrix,
    labels: &[usize],
    prior: &ClassPrior,
    grid: &TauGrid,
) -> Result<CalibrationResult> {
    optimize_tau_multi(std::slice::from_ref(logits), labels, prior, grid)
}

/// Full τ search over several label slices.
///
/// With more than one slice the confidences are averaged across slices
/// before the per-class mean, so the objective scores the labels the
/// evaluation model will actually consume over its epochs.
pub fn optimize_tau_multi(
    slices: &[Matrix],
    labels: &[usize],
    prior: &ClassPrior,
    grid: &TauGrid,
) -> Result<CalibrationResult> {
    if slices.is_empty() {
        return Err(Error::domain("tau search needs at least one label slice".to_string()));
    }
    TauGrid::new(grid.lo, grid.hi, grid.step)?;

    let mut evals: Vec<(f64, f64)> = Vec::new();
    let eval = |tau: f64, evals: &mut Vec<(f64, f64)>| -> Result<f64> {
        let (obj, _) = objective_over_slices(slices, labels, prior, tau)?;
        evals.push((tau, obj));
        Ok(obj)
    };

    let points = grid.points();
    let mut best_tau = points[0];
    let mut best_obj = f64::INFINITY;
    for &tau in &points {
        let obj = eval(tau, &mut evals)?;
        if obj < best_obj {
            best_obj = obj;
            best_tau = tau;
        }
    }
    let grid_min = best_obj;
    let grid_max = evals.iter().map(|&(_, o)| o).fold(f64::NEG_INFINITY, f64::max);
    let grid_argmin_at_lo = best_tau == points[0];

    // One golden-section pass inside ±1 grid step of the grid argmin.
    let mut a = (best_tau - grid.step).max(grid.lo);
    let mut b = (best_tau + grid.step).min(grid.hi);
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = eval(c, &mut evals)?;
    let mut fd = eval(d, &mut evals)?;
    for _ in 0..60 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c, &mut evals)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d, &mut evals)?;
        }
        if b - a < 1e-12 {
            break;
        }
    }

    // The winner is the best evaluated point; ties go to the smallest τ,
    // so evaluation order is irrelevant.
    let (mut tau_star, mut objective_value) = (best_tau, best_obj);
    for &(tau, obj) in &evals {
        if obj < objective_value || (obj == objective_value && tau < tau_star) {
            tau_star = tau;
            objective_value = obj;
        }
    }

    let (baseline_objective, pre) = objective_over_slices(slices, labels, prior, 0.0)?;
    let (_, post) = objective_over_slices(slices, labels, prior, tau_star)?;

    let flat = (grid_max - grid_min).abs() <= 1e-10;
    let calibration_inert = flat && grid_argmin_at_lo;

    let mut objective_trace = evals;
    objective_trace.sort_by(|x, y| x.0.total_cmp(&y.0));
    objective_trace.dedup_by(|x, y| x.0 == y.0);

    Ok(CalibrationResult {
        tau_star,
        objective_value,
        objective_trace,
        per_class_mean_confidence_pre: pre,
        per_class_mean_confidence_post: post,
        baseline_objective,
        calibration_inert,
    })
}

/// Maps every slice of a soft-label set through the calibration at the
/// searched strength. Slices stay independent; shapes are preserved.
pub fn calibrate_softlabel_set(
    sl: &SoftLabelSet,
    prior: &ClassPrior,
    result: &CalibrationResult,
) -> Result<CalibratedLabelSet> {
    if sl.num_classes() != prior.num_classes() {
        return Err(Error::domain(format!(
            "soft labels cover {} classes, prior has {}",
            sl.num_classes(),
            prior.num_classes()
        )));
    }
    let slices = sl
        .slices()
        .iter()
        .map(|s| calibrate_logits(s, prior, result.tau_star))
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibratedLabelSet { slices, tau: result.tau_star })
}
