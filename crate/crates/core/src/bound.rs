//! Exact and Monte-Carlo evaluators for the distribution-shift bound that
//! motivates the whole pipeline.
//!
//! The bound controls test loss by distilled-set loss plus a penalty
//! proportional to the square root of a divergence gap between the test
//! joint and the distilled joint. When the test joint is a class-prior
//! reweighting of the training joint, that gap can be expanded in two
//! algebraically equivalent ways:
//!
//! * **class-wise form** ([`form_classwise`]) — a label-prior KL plus a
//!   test-prior-weighted sum of per-class conditional KLs. This is the form
//!   a distillation loop can act on: match per-class feature statistics and
//!   keep the distilled label histogram balanced.
//! * **posterior form** ([`form_posterior`]) — a posterior KL plus a
//!   marginal-x KL, up to an additive constant that does not depend on the
//!   distilled joint. The constant is never materialized as a number;
//!   [`form_equivalence_check`] verifies constancy by differencing the two
//!   forms across many distilled joints.
//!
//! Everything here is pure f64 and deterministic. Monte-Carlo estimation
//! draws from block-indexed child streams and reduces block sums in a fixed
//! order, so the result does not depend on how work is scheduled.

use crate::numcore::{ProbVector, RngStream};
use crate::{Error, Result};

/// Absolute tolerance for a joint table summing to one.
///
/// Tighter than the probability-vector tolerance because joints are built
/// in f64 by explicit normalization, never read back from f32 storage.
pub const JOINT_SUM_TOL: f64 = 1e-9;

/// Tolerance for the prior-reweighting precondition in
/// [`form_equivalence_check`].
pub const REWEIGHT_TOL: f64 = 1e-12;

/// Minimum sample count accepted by [`mc_kl_estimate`].
pub const MC_MIN_SAMPLES: usize = 1000;

/// Default loss-bound constant `C` for [`BoundReport::assemble`].
pub const DEFAULT_LOSS_BOUND_CONSTANT: f64 = 1.0;

/// Samples per Monte-Carlo block; each block owns one child stream.
const MC_BLOCK: usize = 1024;

/// A finite joint distribution over `Nx` inputs and `K` classes.
///
/// Stored x-major: `table[x * K + y] = p(x, y)`. All entries are
/// non-negative and the table sums to one within [`JOINT_SUM_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    nx: usize,
    num_classes: usize,
    table: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(nx: usize, num_classes: usize, table: Vec<f64>) -> Result<Self> {
        if nx == 0 || num_classes == 0 {
            return Err(Error::domain("joint support must be non-empty on both axes"));
        }
        if table.len() != nx * num_classes {
            return Err(Error::domain(format!(
                "joint table has {} entries, expected {}x{} = {}",
                table.len(),
                nx,
                num_classes,
                nx * num_classes
            )));
        }
        let mut sum = 0.0;
        for (i, &v) in table.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::domain(format!(
                    "joint entry ({}, {}) is {v}, must be finite and >= 0",
                    i / num_classes,
                    i % num_classes
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > JOINT_SUM_TOL {
            return Err(Error::domain(format!("joint table sums to {sum}, expected 1")));
        }
        Ok(DiscreteJoint { nx, num_classes, table })
    }

    /// Builds a joint by normalizing non-negative weights.
    pub fn from_weights(nx: usize, num_classes: usize, weights: &[f64]) -> Result<Self> {
        if weights.len() != nx * num_classes {
            return Err(Error::domain(format!(
                "weight table has {} entries, expected {}",
                weights.len(),
                nx * num_classes
            )));
        }
        let mut sum = 0.0;
        for &w in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::domain(format!("weight {w} is not finite and >= 0")));
            }
            sum += w;
        }
        if sum <= 0.0 {
            return Err(Error::domain("weight table sums to zero"));
        }
        let table = weights.iter().map(|w| w / sum).collect();
        DiscreteJoint::new(nx, num_classes, table)
    }

    /// Random joint with every outcome's mass bounded away from zero.
    pub fn random_full_support(nx: usize, num_classes: usize, rng: &mut RngStream) -> Self {
        let weights: Vec<f64> = (0..nx * num_classes).map(|_| 0.05 + rng.uniform()).collect();
        DiscreteJoint::from_weights(nx, num_classes, &weights)
            .expect("positive weights always normalize")
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn prob(&self, x: usize, y: usize) -> f64 {
        self.table[x * self.num_classes + y]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// `p(x)` for every x.
    pub fn marginal_x(&self) -> Vec<f64> {
        self.table.chunks_exact(self.num_classes).map(|row| row.iter().sum()).collect()
    }

    /// `p(y)` for every y.
    pub fn marginal_y(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes];
        for row in self.table.chunks_exact(self.num_classes) {
            for (acc, &v) in out.iter_mut().zip(row) {
                *acc += v;
            }
        }
        out
    }

    /// `p(x | y)` for a class, or `None` when the class carries no mass.
    pub fn conditional_x_given_y(&self, y: usize) -> Option<Vec<f64>> {
        let mass = self.marginal_y()[y];
        if mass <= 0.0 {
            return None;
        }
        Some((0..self.nx).map(|x| self.prob(x, y) / mass).collect())
    }

    /// `p(y | x)` for an input, or `None` when the input carries no mass.
    pub fn conditional_y_given_x(&self, x: usize) -> Option<Vec<f64>> {
        let row = &self.table[x * self.num_classes..(x + 1) * self.num_classes];
        let mass: f64 = row.iter().sum();
        if mass <= 0.0 {
            return None;
        }
        Some(row.iter().map(|v| v / mass).collect())
    }

    /// Replaces the class prior while keeping every `p(x | y)` fixed:
    /// `p'(x, y) = p(x, y) * prior[y] / p(y)`.
    ///
    /// This is exactly how a balanced test joint is constructed from a
    /// long-tailed training joint.
    pub fn reweight_classes(&self, prior: &ProbVector) -> Result<DiscreteJoint> {
        if prior.len() != self.num_classes {
            return Err(Error::domain(format!(
                "prior has {} classes, joint has {}",
                prior.len(),
                self.num_classes
            )));
        }
        let marg = self.marginal_y();
        let mut table = self.table.clone();
        for y in 0..self.num_classes {
            let target = prior[y];
            if target > 0.0 && marg[y] <= 0.0 {
                return Err(Error::domain(format!(
                    "cannot reweight class {y}: target prior {target} but zero source mass"
                )));
            }
            let scale = if target > 0.0 { target / marg[y] } else { 0.0 };
            for x in 0..self.nx {
                table[x * self.num_classes + y] *= scale;
            }
        }
        DiscreteJoint::new(self.nx, self.num_classes, table)
    }
}

/// Result of a single KL summation; infinities carry the offending site.
#[derive(Debug, Clone, Copy)]
enum TermOutcome {
    Finite(f64),
    Infinite { x: Option<usize>, y: Option<usize>, mass: f64 },
}

impl TermOutcome {
    fn value(&self) -> f64 {
        match self {
            TermOutcome::Finite(v) => *v,
            TermOutcome::Infinite { .. } => f64::INFINITY,
        }
    }
}

/// KL(p || q) over plain slices with the 0·ln 0 := 0 convention.
///
/// Rounding can push the sum of a mathematically non-negative series a few
/// ulps below zero; that noise is snapped to exactly zero.
fn kl_slices(p: &[f64], q: &[f64]) -> std::result::Result<f64, (usize, f64)> {
    debug_assert_eq!(p.len(), q.len());
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err((i, pi));
        }
        acc += pi * (pi / qi).ln();
    }
    debug_assert!(acc > -JOINT_SUM_TOL, "normalized inputs accumulated KL {acc}");
    Ok(acc.max(0.0))
}

/// The class-wise gap expansion with its sub-terms.
#[derive(Debug, Clone)]
pub struct ClasswiseBreakdown {
    /// KL between the test label prior and the distilled label histogram.
    pub label_prior_kl: f64,
    /// KL(p_tr(x|y) || p_dd(x|y)) per class; zero-test-prior classes are
    /// reported as 0 because they contribute nothing to the gap.
    pub per_class_conditional_kl: Vec<f64>,
    /// Test-prior-weighted sum of the per-class conditional KLs.
    pub weighted_conditional_kl: f64,
    /// `label_prior_kl + weighted_conditional_kl`.
    pub value: f64,
}

/// The posterior gap expansion with its sub-terms. The additive constant
/// that completes the identity does not depend on the distilled joint and
/// is deliberately excluded.
#[derive(Debug, Clone)]
pub struct PosteriorBreakdown {
    /// `Σ_x p_te(x) · KL(p_te(y|x) || p_dd(y|x))`.
    pub posterior_kl: f64,
    /// `KL(p_te(x) || p_dd(x))`.
    pub marginal_x_kl: f64,
    /// Sum of the two distilled-joint-dependent terms.
    pub value_without_const: f64,
}

struct RawClasswise {
    label: TermOutcome,
    per_class: Vec<TermOutcome>,
    weights: Vec<f64>,
}

struct RawPosterior {
    posterior: TermOutcome,
    marginal: TermOutcome,
}

fn check_same_support(a: &DiscreteJoint, b: &DiscreteJoint) -> Result<()> {
    if a.nx() != b.nx() || a.num_classes() != b.num_classes() {
        return Err(Error::domain(format!(
            "joint supports differ: {}x{} vs {}x{}",
            a.nx(),
            a.num_classes(),
            b.nx(),
            b.num_classes()
        )));
    }
    Ok(())
}

fn classwise_terms(
    p_tr: &DiscreteJoint,
    p_dd: &DiscreteJoint,
    p_te_prior: &ProbVector,
) -> Result<RawClasswise> {
    check_same_support(p_tr, p_dd)?;
    if p_te_prior.len() != p_tr.num_classes() {
        return Err(Error::domain(format!(
            "test prior has {} classes, joints have {}",
            p_te_prior.len(),
            p_tr.num_classes()
        )));
    }
    let tr_y = p_tr.marginal_y();
    let dd_y = p_dd.marginal_y();

    let label = match kl_slices(p_te_prior.as_slice(), &dd_y) {
        Ok(v) => TermOutcome::Finite(v),
        Err((y, mass)) => TermOutcome::Infinite { x: None, y: Some(y), mass },
    };

    let mut per_class = Vec::with_capacity(p_tr.num_classes());
    let mut weights = Vec::with_capacity(p_tr.num_classes());
    for y in 0..p_tr.num_classes() {
        let w = p_te_prior[y];
        weights.push(w);
        if w <= 0.0 {
            per_class.push(TermOutcome::Finite(0.0));
            continue;
        }
        if tr_y[y] <= 0.0 {
            return Err(Error::domain(format!(
                "class {y} has test prior {w} but zero training mass; its conditional is undefined"
            )));
        }
        let cond_tr: Vec<f64> = (0..p_tr.nx()).map(|x| p_tr.prob(x, y) / tr_y[y]).collect();
        if dd_y[y] <= 0.0 {
            let x = cond_tr.iter().position(|&v| v > 0.0).unwrap_or(0);
            per_class.push(TermOutcome::Infinite { x: Some(x), y: Some(y), mass: cond_tr[x] });
            continue;
        }
        let cond_dd: Vec<f64> = (0..p_dd.nx()).map(|x| p_dd.prob(x, y) / dd_y[y]).collect();
        per_class.push(match kl_slices(&cond_tr, &cond_dd) {
            Ok(v) => TermOutcome::Finite(v),
            Err((x, mass)) => TermOutcome::Infinite { x: Some(x), y: Some(y), mass },
        });
    }
    Ok(RawClasswise { label, per_class, weights })
}

fn posterior_terms(
    p_tr: &DiscreteJoint,
    p_dd: &DiscreteJoint,
    p_te: &DiscreteJoint,
) -> Result<RawPosterior> {
    // p_tr participates only through the support check: the posterior form
    // reads nothing else from the training joint.
    check_same_support(p_tr, p_dd)?;
    check_same_support(p_te, p_dd)?;
    let te_x = p_te.marginal_x();
    let dd_x = p_dd.marginal_x();

    let marginal = match kl_slices(&te_x, &dd_x) {
        Ok(v) => TermOutcome::Finite(v),
        Err((x, mass)) => TermOutcome::Infinite { x: Some(x), y: None, mass },
    };

    let mut acc = 0.0;
    let mut posterior = None;
    for x in 0..p_te.nx() {
        if te_x[x] <= 0.0 {
            continue;
        }
        if dd_x[x] <= 0.0 {
            posterior = Some(TermOutcome::Infinite { x: Some(x), y: None, mass: te_x[x] });
            break;
        }
        let cond_te: Vec<f64> =
            (0..p_te.num_classes()).map(|y| p_te.prob(x, y) / te_x[x]).collect();
        let cond_dd: Vec<f64> =
            (0..p_dd.num_classes()).map(|y| p_dd.prob(x, y) / dd_x[x]).collect();
        match kl_slices(&cond_te, &cond_dd) {
            Ok(v) => acc += te_x[x] * v,
            Err((y, mass)) => {
                posterior = Some(TermOutcome::Infinite { x: Some(x), y: Some(y), mass });
                break;
            }
        }
    }
    Ok(RawPosterior { posterior: posterior.unwrap_or(TermOutcome::Finite(acc)), marginal })
}

fn infinite_to_error(outcome: &TermOutcome) -> Option<Error> {
    match *outcome {
        TermOutcome::Finite(_) => None,
        TermOutcome::Infinite { x: Some(x), y: Some(y), mass } => {
            Some(Error::SupportViolation { x, y, mass })
        }
        TermOutcome::Infinite { x: Some(i), y: None, mass }
        | TermOutcome::Infinite { x: None, y: Some(i), mass } => {
            Some(Error::InfiniteKl { index: i, p: mass })
        }
        TermOutcome::Infinite { x: None, y: None, mass } => {
            Some(Error::numeric(format!("infinite KL with unlocated mass {mass}")))
        }
    }
}

/// Class-wise expansion of the divergence gap:
/// `KL(p_te(y) || p_dd(y)) + Σ_y p_te(y) · KL(p_tr(x|y) || p_dd(x|y))`.
///
/// Errors with the offending outcome when the distilled joint lacks support
/// somewhere the training/test side carries mass. Use
/// [`BoundReport::assemble`] instead to record such holes as flagged
/// sentinels rather than failures.
pub fn form_classwise(
    p_tr: &DiscreteJoint,
    p_dd: &DiscreteJoint,
    p_te_prior: &ProbVector,
) -> Result<ClasswiseBreakdown> {
    let raw = classwise_terms(p_tr, p_dd, p_te_prior)?;
    if let Some(err) = infinite_to_error(&raw.label) {
        return Err(err);
    }
    let mut per_class = Vec::with_capacity(raw.per_class.len());
    let mut weighted = 0.0;
    for (outcome, w) in raw.per_class.iter().zip(&raw.weights) {
        if let Some(err) = infinite_to_error(outcome) {
            return Err(err);
        }
        let v = outcome.value();
        per_class.push(v);
        weighted += w * v;
    }
    let label = raw.label.value();
    Ok(ClasswiseBreakdown {
        label_prior_kl: label,
        per_class_conditional_kl: per_class,
        weighted_conditional_kl: weighted,
        value: label + weighted,
    })
}

/// Posterior expansion of the divergence gap, excluding its additive
/// constant: `Σ_x p_te(x) · KL(p_te(y|x) || p_dd(y|x)) + KL(p_te(x) || p_dd(x))`.
///
/// `p_tr` participates only in support validation; the constant that would
/// involve it cannot be computed from `p_dd` and is excluded by design.
pub fn form_posterior(
    p_tr: &DiscreteJoint,
    p_dd: &DiscreteJoint,
    p_te: &DiscreteJoint,
) -> Result<PosteriorBreakdown> {
    let raw = posterior_terms(p_tr, p_dd, p_te)?;
    if let Some(err) = infinite_to_error(&raw.marginal) {
        return Err(err);
    }
    if let Some(err) = infinite_to_error(&raw.posterior) {
        return Err(err);
    }
    let posterior = raw.posterior.value();
    let marginal = raw.marginal.value();
    Ok(PosteriorBreakdown {
        posterior_kl: posterior,
        marginal_x_kl: marginal,
        value_without_const: posterior + marginal,
    })
}

/// Numerically verifies that the two gap expansions differ by a constant
/// that does not depend on the distilled joint.
///
/// Requires `p_te` to be a class-prior reweighting of `p_tr`
/// (`p_te(x, y) · p_tr(y) == p_tr(x, y) · p_te(y)` within
/// [`REWEIGHT_TOL`]) — the identity only holds under that assumption.
/// Computes `Δ(p_dd) = classwise − posterior_without_const` for every
/// distilled joint and returns `max |Δ(p_dd_i) − Δ(p_dd_0)|`, which the
/// identity predicts to be zero. When `p_tr == p_te` the constant itself
/// vanishes and every `Δ` is zero.
pub fn form_equivalence_check(
    p_tr: &DiscreteJoint,
    p_te: &DiscreteJoint,
    dd_list: &[DiscreteJoint],
) -> Result<f64> {
    check_same_support(p_tr, p_te)?;
    if dd_list.is_empty() {
        return Err(Error::domain("need at least one distilled joint to compare"));
    }
    let tr_y = p_tr.marginal_y();
    let te_y = p_te.marginal_y();
    for x in 0..p_tr.nx() {
        for y in 0..p_tr.num_classes() {
            let lhs = p_te.prob(x, y) * tr_y[y];
            let rhs = p_tr.prob(x, y) * te_y[y];
            if (lhs - rhs).abs() > REWEIGHT_TOL {
                return Err(Error::domain(format!(
                    "test joint is not a class-prior reweighting of the training joint: \
                     at (x={x}, y={y}) got {lhs:e} vs {rhs:e}"
                )));
            }
        }
    }
    let te_prior = ProbVector::new(te_y)?;
    let mut deltas = Vec::with_capacity(dd_list.len());
    for dd in dd_list {
        let classwise = form_classwise(p_tr, dd, &te_prior)?;
        let posterior = form_posterior(p_tr, dd, p_te)?;
        deltas.push(classwise.value - posterior.value_without_const);
    }
    let base = deltas[0];
    Ok(deltas.iter().map(|d| (d - base).abs()).fold(0.0, f64::max))
}

/// Closed-form KL between two diagonal Gaussians:
/// `Σ_d ½(ln(var2/var1) + (var1 + (mu1 − mu2)²)/var2 − 1)`.
pub fn gaussian_kl_diag(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> Result<f64> {
    let d = mu1.len();
    if var1.len() != d || mu2.len() != d || var2.len() != d {
        return Err(Error::domain(format!(
            "dimension mismatch: mu1 {}, var1 {}, mu2 {}, var2 {}",
            d,
            var1.len(),
            mu2.len(),
            var2.len()
        )));
    }
    let mut acc = 0.0;
    for i in 0..d {
        let (m1, v1, m2, v2) = (mu1[i], var1[i], mu2[i], var2[i]);
        if !m1.is_finite() || !m2.is_finite() {
            return Err(Error::domain(format!("mean component {i} is not finite")));
        }
        if !(v1.is_finite() && v1 > 0.0 && v2.is_finite() && v2 > 0.0) {
            return Err(Error::domain(format!(
                "variance component {i} must be finite and positive, got {v1} and {v2}"
            )));
        }
        let dm = m1 - m2;
        acc += 0.5 * ((v2 / v1).ln() + (v1 + dm * dm) / v2 - 1.0);
    }
    debug_assert!(acc > -JOINT_SUM_TOL, "diagonal-Gaussian KL accumulated {acc}");
    Ok(acc.max(0.0))
}

/// Monte-Carlo estimate of `E_p[log_ratio(x)]` with its standard error.
///
/// `sample` draws one point from `p`; `log_ratio` evaluates
/// `ln p(x) − ln q(x)` at that point, so the expectation is KL(p || q).
/// Sampling is organized in blocks of [`MC_BLOCK`] draws, each from its own
/// child stream of `rng` (the parent is never consumed), and block results
/// are reduced in index order — the estimate is a pure function of
/// `(rng, n)` no matter how blocks might be scheduled.
pub fn mc_kl_estimate<S, L>(
    mut sample: S,
    log_ratio: L,
    n: usize,
    rng: &RngStream,
) -> Result<(f64, f64)>
where
    S: FnMut(&mut RngStream) -> Vec<f64>,
    L: Fn(&[f64]) -> f64,
{
    if n < MC_MIN_SAMPLES {
        return Err(Error::domain(format!(
            "Monte-Carlo KL needs at least {MC_MIN_SAMPLES} samples, got {n}"
        )));
    }
    let mut values = Vec::with_capacity(n);
    let mut drawn = 0;
    let mut block = 0u64;
    while drawn < n {
        let mut block_rng = rng.child(block);
        let take = MC_BLOCK.min(n - drawn);
        for _ in 0..take {
            let point = sample(&mut block_rng);
            let v = log_ratio(&point);
            if !v.is_finite() {
                return Err(Error::numeric(format!(
                    "log-ratio at sample {} is {v}; cannot estimate KL",
                    drawn
                )));
            }
            values.push(v);
            drawn += 1;
        }
        block += 1;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    Ok((mean, (var / n as f64).sqrt()))
}

/// One named divergence term of a [`BoundReport`].
///
/// `is_infinite` marks a support violation (the distilled joint misses a
/// region that carries reference mass); the value is then `f64::INFINITY`
/// rather than being silently dropped, because distilled supports genuinely
/// can miss regions of the training distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct KlTerm {
    pub name: String,
    pub value: f64,
    pub is_infinite: bool,
}

impl KlTerm {
    fn finite(name: impl Into<String>, value: f64) -> Self {
        KlTerm { name: name.into(), value, is_infinite: false }
    }

    fn infinite(name: impl Into<String>) -> Self {
        KlTerm { name: name.into(), value: f64::INFINITY, is_infinite: true }
    }

    fn from_outcome(name: impl Into<String>, outcome: &TermOutcome) -> Self {
        match outcome {
            TermOutcome::Finite(v) => KlTerm::finite(name, *v),
            TermOutcome::Infinite { .. } => KlTerm::infinite(name),
        }
    }
}

/// Every term of the assembled distribution-shift bound.
///
/// All plugged-in losses are empirical: the report never claims the
/// population inequality holds numerically for finite samples.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub label_prior_kl: KlTerm,
    pub per_class_conditional_kl: Vec<KlTerm>,
    pub weighted_conditional_kl: KlTerm,
    pub posterior_kl: KlTerm,
    pub marginal_x_kl: KlTerm,
    /// The user-supplied constant `C` bounding the per-sample loss.
    pub loss_bound_constant: f64,
    /// Empirical loss of the evaluated model on the distilled set.
    pub empirical_loss_dd: f64,
    /// The class-wise gap value `R`; infinite when any contributing term is
    /// flagged.
    pub distribution_gap: f64,
    /// `empirical_loss_dd + (C / (2√2)) · √R`.
    pub bound_value: f64,
}

impl BoundReport {
    /// Computes every divergence term relating the three joints and
    /// assembles the bound. Support violations become flagged sentinel
    /// terms instead of errors; genuine precondition failures (mismatched
    /// supports, non-positive `C`, a test class with zero training mass)
    /// still error.
    pub fn assemble(
        p_tr: &DiscreteJoint,
        p_dd: &DiscreteJoint,
        p_te: &DiscreteJoint,
        loss_bound_constant: f64,
        empirical_loss_dd: f64,
    ) -> Result<BoundReport> {
        if !(loss_bound_constant.is_finite() && loss_bound_constant > 0.0) {
            return Err(Error::domain(format!(
                "loss bound constant must be finite and positive, got {loss_bound_constant}"
            )));
        }
        if !empirical_loss_dd.is_finite() {
            return Err(Error::domain(format!(
                "empirical distilled-set loss must be finite, got {empirical_loss_dd}"
            )));
        }
        check_same_support(p_tr, p_te)?;
        let te_prior = ProbVector::new(p_te.marginal_y())?;
        let classwise = classwise_terms(p_tr, p_dd, &te_prior)?;
        let posterior = posterior_terms(p_tr, p_dd, p_te)?;

        let mut per_class = Vec::with_capacity(classwise.per_class.len());
        let mut weighted = 0.0;
        for (y, (outcome, w)) in classwise.per_class.iter().zip(&classwise.weights).enumerate() {
            per_class.push(KlTerm::from_outcome(format!("conditional_kl_class_{y}"), outcome));
            if *w > 0.0 {
                weighted += w * outcome.value();
            }
        }
        let weighted_term = if weighted.is_finite() {
            KlTerm::finite("weighted_conditional_kl", weighted)
        } else {
            KlTerm::infinite("weighted_conditional_kl")
        };
        let label_term = KlTerm::from_outcome("label_prior_kl", &classwise.label);

        let gap = label_term.value + weighted_term.value;
        let bound =
            empirical_loss_dd + loss_bound_constant / (2.0 * 2.0_f64.sqrt()) * gap.sqrt();
        Ok(BoundReport {
            label_prior_kl: label_term,
            per_class_conditional_kl: per_class,
            weighted_conditional_kl: weighted_term,
            posterior_kl: KlTerm::from_outcome("posterior_kl", &posterior.posterior),
            marginal_x_kl: KlTerm::from_outcome("marginal_x_kl", &posterior.marginal),
            loss_bound_constant,
            empirical_loss_dd,
            distribution_gap: gap,
            bound_value: bound,
        })
    }

    pub fn has_infinite_term(&self) -> bool {
        self.label_prior_kl.is_infinite
            || self.weighted_conditional_kl.is_infinite
            || self.posterior_kl.is_infinite
            || self.marginal_x_kl.is_infinite
            || self.per_class_conditional_kl.iter().any(|t| t.is_infinite)
    }

    /// Flattens the report to `(name, value, is_infinite)` rows in a fixed
    /// order, ready for CSV or manifest emission.
    pub fn rows(&self) -> Vec<(String, f64, bool)> {
        let mut rows = Vec::with_capacity(self.per_class_conditional_kl.len() + 8);
        let term = |t: &KlTerm| (t.name.clone(), t.value, t.is_infinite);
        rows.push(term(&self.label_prior_kl));
        for t in &self.per_class_conditional_kl {
            rows.push(term(t));
        }
        rows.push(term(&self.weighted_conditional_kl));
        rows.push(term(&self.posterior_kl));
        rows.push(term(&self.marginal_x_kl));
        rows.push((
            "distribution_gap".into(),
            self.distribution_gap,
            self.distribution_gap.is_infinite(),
        ));
        rows.push(("empirical_loss_dd".into(), self.empirical_loss_dd, false));
        rows.push(("loss_bound_constant".into(), self.loss_bound_constant, false));
        rows.push(("bound_value".into(), self.bound_value, self.bound_value.is_infinite()));
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::longtail::{class_prior, LongTailSpec};
    use crate::numcore::kl_divergence;
    use proptest::prelude::*;

    fn joint(nx: usize, k: usize, weights: &[f64]) -> DiscreteJoint {
        DiscreteJoint::from_weights(nx, k, weights).unwrap()
    }

    /// Independent enumeration of the class-wise form, written directly
    /// from its definition with raw loops.
    fn brute_classwise(p_tr: &DiscreteJoint, p_dd: &DiscreteJoint, te: &[f64]) -> f64 {
        let tr_y = p_tr.marginal_y();
        let dd_y = p_dd.marginal_y();
        let mut total = 0.0;
        for y in 0..p_tr.num_classes() {
            if te[y] > 0.0 {
                total += te[y] * (te[y] / dd_y[y]).ln();
            }
        }
        for y in 0..p_tr.num_classes() {
            if te[y] <= 0.0 {
                continue;
            }
            for x in 0..p_tr.nx() {
                let a = p_tr.prob(x, y) / tr_y[y];
                let b = p_dd.prob(x, y) / dd_y[y];
                if a > 0.0 {
                    total += te[y] * a * (a / b).ln();
                }
            }
        }
        total
    }

    /// Independent enumeration of the posterior form (without constant).
    fn brute_posterior(p_dd: &DiscreteJoint, p_te: &DiscreteJoint) -> f64 {
        let te_x = p_te.marginal_x();
        let dd_x = p_dd.marginal_x();
        let mut total = 0.0;
        for x in 0..p_te.nx() {
            if te_x[x] > 0.0 {
                total += te_x[x] * (te_x[x] / dd_x[x]).ln();
            }
        }
        for x in 0..p_te.nx() {
            if te_x[x] <= 0.0 {
                continue;
            }
            for y in 0..p_te.num_classes() {
                let a = p_te.prob(x, y) / te_x[x];
                let b = p_dd.prob(x, y) / dd_x[x];
                if a > 0.0 {
                    total += te_x[x] * a * (a / b).ln();
                }
            }
        }
        total
    }

    fn random_prior(k: usize, rng: &mut RngStream) -> ProbVector {
        let w: Vec<f64> = (0..k).map(|_| 0.1 + rng.uniform()).collect();
        let sum: f64 = w.iter().sum();
        ProbVector::new(w.into_iter().map(|v| v / sum).collect()).unwrap()
    }

    #[test]
    fn joint_validates_entries_and_sum() {
        assert!(DiscreteJoint::new(2, 2, vec![0.25; 4]).is_ok());
        assert!(DiscreteJoint::new(2, 2, vec![0.5, 0.5, -0.5, 0.5]).is_err());
        assert!(DiscreteJoint::new(2, 2, vec![0.3; 4]).is_err());
        assert!(DiscreteJoint::new(2, 2, vec![0.25; 3]).is_err());
        let j = joint(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mx: f64 = j.marginal_x().iter().sum();
        let my: f64 = j.marginal_y().iter().sum();
        assert!((mx - 1.0).abs() < 1e-12 && (my - 1.0).abs() < 1e-12);
        assert!((j.prob(1, 0) - 3.0 / 21.0).abs() < 1e-15);
    }

    #[test]
    fn reweighting_preserves_conditionals() {
        let mut rng = RngStream::new(3);
        let tr = DiscreteJoint::random_full_support(4, 3, &mut rng);
        let te = tr.reweight_classes(&ProbVector::uniform(3).unwrap()).unwrap();
        let prior = te.marginal_y();
        for p in prior {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        for y in 0..3 {
            let a = tr.conditional_x_given_y(y).unwrap();
            let b = te.conditional_x_given_y(y).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12, "conditional of class {y} changed");
            }
        }
    }

    #[test]
    fn classwise_vanishes_when_distilled_matches() {
        let mut rng = RngStream::new(11);
        let tr = DiscreteJoint::random_full_support(4, 3, &mut rng);
        let te_prior = ProbVector::uniform(3).unwrap();
        let dd = tr.reweight_classes(&te_prior).unwrap();
        let breakdown = form_classwise(&tr, &dd, &te_prior).unwrap();
        assert!(breakdown.value < 1e-12, "matched joints gave gap {}", breakdown.value);
        assert!(breakdown.label_prior_kl < 1e-12);
        assert!(breakdown.weighted_conditional_kl < 1e-12);
    }

    #[test]
    fn classwise_reduces_to_label_prior_oracle() {
        // Shared conditionals kill the weighted term, so the value must hit
        // the frozen two-point KL oracle exactly: KL([.5,.5] || [.8,.2]).
        let cond = [0.5, 0.3, 0.2];
        let build = |prior: [f64; 2]| {
            let mut w = vec![0.0; 6];
            for (x, c) in cond.iter().enumerate() {
                for (y, p) in prior.iter().enumerate() {
                    w[x * 2 + y] = c * p;
                }
            }
            joint(3, 2, &w)
        };
        let tr = build([0.6, 0.4]);
        let dd = build([0.8, 0.2]);
        let breakdown = form_classwise(&tr, &dd, &ProbVector::uniform(2).unwrap()).unwrap();
        let expected = 0.22314355131420976;
        assert!((breakdown.label_prior_kl - expected).abs() < 1e-15);
        assert!(breakdown.weighted_conditional_kl.abs() < 1e-15);
        assert!((breakdown.value - expected).abs() < 1e-15);
    }

    #[test]
    fn classwise_matches_brute_force_enumeration() {
        let mut rng = RngStream::new(31);
        for _ in 0..20 {
            let tr = DiscreteJoint::random_full_support(4, 3, &mut rng);
            let dd = DiscreteJoint::random_full_support(4, 3, &mut rng);
            let te = random_prior(3, &mut rng);
            let fast = form_classwise(&tr, &dd, &te).unwrap();
            let brute = brute_classwise(&tr, &dd, te.as_slice());
            assert!(
                (fast.value - brute).abs() < 1e-12,
                "classwise {} vs brute force {}",
                fast.value,
                brute
            );
        }
    }

    #[test]
    fn classwise_names_offending_outcome_on_support_hole() {
        let tr = joint(2, 2, &[0.25, 0.25, 0.25, 0.25]);
        let dd = joint(2, 2, &[0.4, 0.3, 0.0, 0.3]);
        let err = form_classwise(&tr, &dd, &ProbVector::uniform(2).unwrap()).unwrap_err();
        match err {
            Error::SupportViolation { x, y, .. } => {
                assert_eq!((x, y), (1, 0));
            }
            other => panic!("expected support violation, got {other}"),
        }
    }

    #[test]
    fn classwise_flags_missing_class_via_label_term() {
        let tr = joint(2, 2, &[0.25, 0.25, 0.25, 0.25]);
        let dd = joint(2, 2, &[0.5, 0.0, 0.5, 0.0]);
        let err = form_classwise(&tr, &dd, &ProbVector::uniform(2).unwrap()).unwrap_err();
        match err {
            Error::InfiniteKl { index, .. } => assert_eq!(index, 1),
            other => panic!("expected infinite label KL, got {other}"),
        }
    }

    #[test]
    fn posterior_vanishes_when_distilled_equals_test() {
        let mut rng = RngStream::new(17);
        let te = DiscreteJoint::random_full_support(4, 3, &mut rng);
        let b = form_posterior(&te, &te.clone(), &te).unwrap();
        assert!(b.value_without_const < 1e-12);
        assert!(b.posterior_kl < 1e-12 && b.marginal_x_kl < 1e-12);
    }

    #[test]
    fn posterior_reduces_to_pure_posterior_term_when_x_marginals_match() {
        let te = joint(2, 2, &[0.3, 0.2, 0.1, 0.4]);
        let dd = joint(2, 2, &[0.25, 0.25, 0.25, 0.25]);
        let b = form_posterior(&te, &dd, &te).unwrap();
        assert_eq!(b.marginal_x_kl, 0.0, "shared x-marginals must zero the second term");
        assert!(b.posterior_kl > 0.01);
        assert_eq!(b.value_without_const, b.posterior_kl);
    }

    #[test]
    fn posterior_matches_brute_force_enumeration() {
        let mut rng = RngStream::new(47);
        for _ in 0..20 {
            let tr = DiscreteJoint::random_full_support(4, 3, &mut rng);
            let dd = DiscreteJoint::random_full_support(4, 3, &mut rng);
            let te = DiscreteJoint::random_full_support(4, 3, &mut rng);
            let fast = form_posterior(&tr, &dd, &te).unwrap();
            let brute = brute_posterior(&dd, &te);
            assert!(
                (fast.value_without_const - brute).abs() < 1e-12,
                "posterior {} vs brute force {}",
                fast.value_without_const,
                brute
            );
        }
    }

    #[test]
    fn posterior_names_offending_outcome_on_support_hole() {
        let te = joint(2, 2, &[0.3, 0.2, 0.1, 0.4]);
        let dd = joint(2, 2, &[0.5, 0.0, 0.25, 0.25]);
        let err = form_posterior(&te, &dd, &te).unwrap_err();
        match err {
            Error::SupportViolation { x, y, .. } => assert_eq!((x, y), (0, 1)),
            other => panic!("expected support violation, got {other}"),
        }
    }

    #[test]
    fn posterior_flags_missing_input_via_marginal_term() {
        let te = joint(2, 2, &[0.3, 0.2, 0.1, 0.4]);
        let dd = joint(2, 2, &[0.5, 0.5, 0.0, 0.0]);
        let err = form_posterior(&te, &dd, &te).unwrap_err();
        match err {
            Error::InfiniteKl { index, .. } => assert_eq!(index, 1),
            other => panic!("expected infinite marginal KL, got {other}"),
        }
    }

    // The operational content of the two-form identity: their difference
    // must not move when the distilled joint does.
    #[test]
    fn forms_differ_by_a_constant_across_hundred_distilled_joints() {
        let mut rng = RngStream::new(57);
        let tr = DiscreteJoint::random_full_support(4, 3, &mut rng);
        let te = tr.reweight_classes(&ProbVector::uniform(3).unwrap()).unwrap();
        let dd_list: Vec<DiscreteJoint> =
            (0..100).map(|_| DiscreteJoint::random_full_support(4, 3, &mut rng)).collect();
        let spread = form_equivalence_check(&tr, &te, &dd_list).unwrap();
        assert!(spread < 1e-9, "forms drifted apart by {spread}");

        // The shared constant is genuinely non-zero here: the check is not
        // comparing zeros against zeros.
        let te_prior = ProbVector::new(te.marginal_y()).unwrap();
        let delta = form_classwise(&tr, &dd_list[0], &te_prior).unwrap().value
            - form_posterior(&tr, &dd_list[0], &te).unwrap().value_without_const;
        assert!(delta.is_finite());
    }

    #[test]
    fn single_distilled_joint_gives_zero_spread() {
        let mut rng = RngStream::new(5);
        let tr = DiscreteJoint::random_full_support(4, 3, &mut rng);
        let te = tr.reweight_classes(&ProbVector::uniform(3).unwrap()).unwrap();
        let spread = form_equivalence_check(&tr, &te, std::slice::from_ref(&te)).unwrap();
        assert_eq!(spread, 0.0);
    }

    #[test]
    fn constant_vanishes_when_train_equals_test() {
        let mut rng = RngStream::new(23);
        let tr = DiscreteJoint::random_full_support(4, 3, &mut rng);
        let te_prior = ProbVector::new(tr.marginal_y()).unwrap();
        for _ in 0..10 {
            let dd = DiscreteJoint::random_full_support(4, 3, &mut rng);
            let delta = form_classwise(&tr, &dd, &te_prior).unwrap().value
                - form_posterior(&tr, &dd, &tr).unwrap().value_without_const;
            assert!(delta.abs() < 1e-9, "balanced-train constant should vanish, got {delta}");
        }
        assert!(form_equivalence_check(&tr, &tr, &[tr.clone()]).unwrap() < 1e-12);
    }

    #[test]
    fn equivalence_check_rejects_unrelated_test_joint() {
        let mut rng = RngStream::new(7);
        let tr = DiscreteJoint::random_full_support(4, 3, &mut rng);
        let te = DiscreteJoint::random_full_support(4, 3, &mut rng);
        let err = form_equivalence_check(&tr, &te, &[tr.clone()]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)), "expected precondition rejection, got {err}");
    }

    #[test]
    fn gaussian_kl_of_identical_distributions_is_zero() {
        let mu = [0.3, -1.0, 2.5];
        let var = [1.0, 0.5, 2.0];
        assert_eq!(gaussian_kl_diag(&mu, &var, &mu, &var).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_kl_unit_shift_is_half() {
        let kl = gaussian_kl_diag(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap();
        assert!((kl - 0.5).abs() < 1e-15, "unit-mean-shift KL should be 1/2, got {kl}");
    }

    #[test]
    fn gaussian_kl_rejects_bad_variances() {
        assert!(gaussian_kl_diag(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
        assert!(gaussian_kl_diag(&[0.0], &[1.0], &[0.0], &[-1.0]).is_err());
        assert!(gaussian_kl_diag(&[0.0, 1.0], &[1.0], &[0.0], &[1.0]).is_err());
    }

    fn diag_log_density(x: &[f64], mu: &[f64], var: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..x.len() {
            let d = x[i] - mu[i];
            acc += -0.5 * ((2.0 * std::f64::consts::PI * var[i]).ln() + d * d / var[i]);
        }
        acc
    }

    #[test]
    fn gaussian_kl_agrees_with_monte_carlo() {
        let mu1 = [0.3, -0.7, 1.2, 0.0, 0.5];
        let var1 = [1.0, 0.5, 2.0, 1.5, 0.8];
        let mu2 = [0.0, 0.0, 1.0, 0.4, 0.5];
        let var2 = [1.2, 0.7, 1.1, 1.0, 0.9];
        let analytic = gaussian_kl_diag(&mu1, &var1, &mu2, &var2).unwrap();
        let rng = RngStream::new(2024);
        let sd1: Vec<f64> = var1.iter().map(|v| v.sqrt()).collect();
        let (estimate, se) = mc_kl_estimate(
            |r| mu1.iter().zip(&sd1).map(|(m, s)| m + s * r.normal()).collect(),
            |x| diag_log_density(x, &mu1, &var1) - diag_log_density(x, &mu2, &var2),
            1_000_000,
            &rng,
        )
        .unwrap();
        assert!(se > 0.0);
        assert!(
            (estimate - analytic).abs() <= 3.0 * se,
            "MC {estimate} vs analytic {analytic}, se {se}"
        );
    }

    #[test]
    fn mc_estimate_is_zero_for_identical_distributions() {
        let rng = RngStream::new(88);
        let mu: [f64; 2] = [0.0, 1.0];
        let var: [f64; 2] = [1.0, 0.5];
        let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        let (estimate, se) = mc_kl_estimate(
            |r| mu.iter().zip(&sd).map(|(m, s)| m + s * r.normal()).collect(),
            |x| diag_log_density(x, &mu, &var) - diag_log_density(x, &mu, &var),
            2000,
            &rng,
        )
        .unwrap();
        assert!(estimate.abs() <= 3.0 * se);
        assert_eq!(estimate, 0.0, "identical densities must cancel exactly");
    }

    #[test]
    fn mc_standard_error_halves_when_samples_quadruple() {
        let rng = RngStream::new(99);
        let run = |n: usize| {
            mc_kl_estimate(
                |r| vec![r.normal()],
                |x| diag_log_density(x, &[0.0], &[1.0]) - diag_log_density(x, &[1.0], &[1.0]),
                n,
                &rng,
            )
            .unwrap()
        };
        let (est, se_small) = run(10_000);
        let (_, se_large) = run(40_000);
        assert!((est - 0.5).abs() <= 4.0 * se_small, "KL(N(0,1)||N(1,1)) should be 1/2");
        let ratio = se_small / (2.0 * se_large);
        assert!(
            (ratio - 1.0).abs() < 0.2,
            "SE should scale as 1/sqrt(n): got {se_small} -> {se_large}"
        );
    }

    #[test]
    fn mc_rejects_tiny_sample_counts_and_bad_ratios() {
        let rng = RngStream::new(1);
        let small = mc_kl_estimate(|r| vec![r.normal()], |_| 0.0, 999, &rng);
        assert!(matches!(small, Err(Error::Domain(_))));
        let bad = mc_kl_estimate(|r| vec![r.normal()], |_| f64::NAN, 1000, &rng);
        assert!(matches!(bad, Err(Error::Numeric(_))));
    }

    #[test]
    fn label_prior_gap_grows_with_imbalance() {
        for k in [10usize, 100] {
            let uniform = ProbVector::uniform(k).unwrap();
            let mut last = -1.0;
            for r in [2.0, 10.0, 50.0, 100.0] {
                let counts = LongTailSpec::exponential(k, 1000, r).unwrap().counts().unwrap();
                let prior = class_prior(&counts).unwrap();
                let gap = kl_divergence(&uniform, prior.as_prob()).unwrap();
                assert!(
                    gap > last,
                    "KL(uniform || prior) must grow with imbalance: r={r} K={k} gave {gap} <= {last}"
                );
                last = gap;
            }
        }
    }

    #[test]
    fn balanced_distilled_labels_zero_the_label_term() {
        use crate::distill::DistilledSet;
        use crate::numcore::Matrix;
        let k = 3;
        let ipc = 4;
        let set = DistilledSet::new(Matrix::zeros(k * ipc, 2).unwrap(), ipc, k).unwrap();
        let mut counts = vec![0usize; k];
        for &y in set.labels() {
            counts[y] += 1;
        }
        assert!(counts.iter().all(|&c| c == ipc));
        let prior = class_prior(&counts).unwrap();
        let gap = kl_divergence(&ProbVector::uniform(k).unwrap(), prior.as_prob()).unwrap();
        assert_eq!(gap, 0.0, "balanced labels must make the label term exactly zero");
    }

    #[test]
    fn report_assembles_all_terms() {
        let mut rng = RngStream::new(12);
        let tr = DiscreteJoint::random_full_support(4, 3, &mut rng);
        let te = tr.reweight_classes(&ProbVector::uniform(3).unwrap()).unwrap();
        let dd = DiscreteJoint::random_full_support(4, 3, &mut rng);
        let report =
            BoundReport::assemble(&tr, &dd, &te, DEFAULT_LOSS_BOUND_CONSTANT, 0.37).unwrap();
        assert!(!report.has_infinite_term());

        let te_prior = ProbVector::new(te.marginal_y()).unwrap();
        let classwise = form_classwise(&tr, &dd, &te_prior).unwrap();
        assert!((report.distribution_gap - classwise.value).abs() < 1e-15);
        let expected = 0.37 + 1.0 / (2.0 * 2.0_f64.sqrt()) * classwise.value.sqrt();
        assert!((report.bound_value - expected).abs() < 1e-15);

        let rows = report.rows();
        assert_eq!(rows.len(), 3 + 1 + 1 + 1 + 1 + 4);
        assert!(rows.iter().any(|(name, ..)| name == "conditional_kl_class_2"));
        assert!(rows.iter().all(|(_, v, inf)| *inf || v.is_finite()));
    }

    #[test]
    fn report_flags_support_holes_instead_of_failing() {
        let tr = joint(2, 2, &[0.25, 0.25, 0.25, 0.25]);
        let te = tr.clone();
        let dd = joint(2, 2, &[0.4, 0.3, 0.0, 0.3]);
        let report = BoundReport::assemble(&tr, &dd, &te, 1.0, 0.1).unwrap();
        assert!(report.has_infinite_term());
        assert!(report.per_class_conditional_kl[0].is_infinite);
        assert!(!report.per_class_conditional_kl[1].is_infinite);
        assert!(report.weighted_conditional_kl.is_infinite);
        assert!(report.posterior_kl.is_infinite);
        assert!(!report.marginal_x_kl.is_infinite);
        assert!(report.distribution_gap.is_infinite());
        assert!(report.bound_value.is_infinite());
    }

    #[test]
    fn report_rejects_bad_constants() {
        let tr = joint(2, 2, &[0.25, 0.25, 0.25, 0.25]);
        assert!(BoundReport::assemble(&tr, &tr, &tr, 0.0, 0.1).is_err());
        assert!(BoundReport::assemble(&tr, &tr, &tr, -1.0, 0.1).is_err());
        assert!(BoundReport::assemble(&tr, &tr, &tr, 1.0, f64::NAN).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gap_terms_are_nonnegative_and_forms_agree(
            seed in any::<u64>(),
            nx in 2usize..6,
            k in 2usize..5,
        ) {
            let mut rng = RngStream::new(seed);
            let tr = DiscreteJoint::random_full_support(nx, k, &mut rng);
            let target = random_prior(k, &mut rng);
            let te = tr.reweight_classes(&target).unwrap();
            let te_prior = ProbVector::new(te.marginal_y()).unwrap();

            let dd_list: Vec<DiscreteJoint> =
                (0..5).map(|_| DiscreteJoint::random_full_support(nx, k, &mut rng)).collect();
            for dd in &dd_list {
                let cw = form_classwise(&tr, dd, &te_prior).unwrap();
                prop_assert!(cw.label_prior_kl >= 0.0);
                prop_assert!(cw.weighted_conditional_kl >= 0.0);
                prop_assert!(cw.per_class_conditional_kl.iter().all(|&v| v >= 0.0));
                let post = form_posterior(&tr, dd, &te).unwrap();
                prop_assert!(post.posterior_kl >= 0.0);
                prop_assert!(post.marginal_x_kl >= 0.0);
            }
            let spread = form_equivalence_check(&tr, &te, &dd_list).unwrap();
            prop_assert!(
                spread < 1e-9,
                "FALSIFIED: form difference moved by {} across distilled joints",
                spread
            );
        }

        #[test]
        fn gaussian_kl_nonnegative_and_zero_iff_equal(
            seed in any::<u64>(),
            d in 1usize..6,
        ) {
            let mut rng = RngStream::new(seed);
            let mu1: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let var1: Vec<f64> = (0..d).map(|_| 0.2 + rng.uniform()).collect();
            let mu2: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let var2: Vec<f64> = (0..d).map(|_| 0.2 + rng.uniform()).collect();
            let kl = gaussian_kl_diag(&mu1, &var1, &mu2, &var2).unwrap();
            prop_assert!(kl >= 0.0, "FALSIFIED: Gaussian KL went negative: {}", kl);
            prop_assert_eq!(gaussian_kl_diag(&mu1, &var1, &mu1, &var1).unwrap(), 0.0);
            if mu1.iter().zip(&mu2).any(|(a, b)| (a - b).abs() > 1e-6) {
                prop_assert!(kl > 0.0, "FALSIFIED: distinct Gaussians gave zero KL");
            }
        }
    }
}
