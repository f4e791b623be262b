//! Input-space distillation against a frozen teacher.
//!
//! Each synthetic item (x̃, y) descends the objective
//!
//! `CE(teacher(x̃), y) + λ · ‖g(x̃) − stats[y]‖²`
//!
//! where `g` is the teacher's backbone and `stats[y]` the class-y feature
//! mean of the real training data. Labels are dealt round-robin with
//! exactly `ipc` items per class, so the distilled set is balanced no
//! matter how skewed the training data was — label imbalance can only
//! re-enter later through the relabeling stage.

use crate::longtail::LabeledSet;
use crate::model::MlpModel;
use crate::numcore::{finite_diff_check, Matrix, ProbVector, RngStream};
use crate::{Error, Result};

/// A balanced synthetic dataset: `ipc` items for each of `K` classes,
/// labels interleaved (`labels[m] = m mod K`).
#[derive(Debug, Clone, PartialEq)]
pub struct DistilledSet {
    features: Matrix,
    labels: Vec<usize>,
    ipc: usize,
}

impl DistilledSet {
    pub fn new(features: Matrix, ipc: usize, num_classes: usize) -> Result<Self> {
        if ipc == 0 || num_classes == 0 {
            return Err(Error::domain(format!(
                "distilled set needs positive ipc and class count, got {ipc} and {num_classes}"
            )));
        }
        if features.rows() != ipc * num_classes {
            return Err(Error::domain(format!(
                "{} rows cannot hold {num_classes} classes × {ipc} items",
                features.rows()
            )));
        }
        let labels = (0..features.rows()).map(|m| m % num_classes).collect();
        Ok(DistilledSet { features, labels, ipc })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len() / self.ipc
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// View as a labeled set (e.g. to train an evaluation model on hard
    /// distilled labels).
    pub fn to_labeled_set(&self) -> Result<LabeledSet> {
        LabeledSet::new(self.features.clone(), self.labels.clone(), self.num_classes())
    }
}

/// How synthetic inputs start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Standard normal noise.
    Noise,
    /// Class mean plus noise at a tenth of the mean matrix's RMS scale —
    /// converges far faster on mixture data; noise-only is kept for
    /// ablation.
    ClassMeanPlusNoise,
}

#[derive(Debug, Clone)]
pub struct DistillConfig {
    /// May be zero: a zero-step run returns the initialization untouched.
    pub steps: usize,
    pub learning_rate: f64,
    /// Weight λ of the feature-anchoring term.
    pub reg_weight: f64,
    pub init: InitScheme,
    pub rng: RngStream,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain(format!(
                "distillation step size must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::domain(format!(
                "feature-anchoring weight must be finite and non-negative, got {}",
                self.reg_weight
            )));
        }
        Ok(())
    }
}

/// A finished synthesis run: the set plus the objective trace (entry 0 is
/// the initialization's objective, one entry per step after that).
#[derive(Debug, Clone)]
pub struct DistillRun {
    pub set: DistilledSet,
    pub objective_trace: Vec<f64>,
}

/// Per-class mean of the teacher's backbone features over `data`.
///
/// Row `k` of the result anchors every class-`k` synthetic item.
pub fn class_feature_stats(teacher: &MlpModel, data: &LabeledSet) -> Result<Matrix> {
    if data.num_classes() != teacher.num_classes() {
        return Err(Error::domain(format!(
            "data has {} classes, teacher has {}",
            data.num_classes(),
            teacher.num_classes()
        )));
    }
    if let Some(k) = data.class_counts().iter().position(|&c| c == 0) {
        return Err(Error::capacity(format!(
            "class {k} has no samples; cannot anchor its distilled items"
        )));
    }
    let feats = teacher.extract_features(data.features())?;
    let h = feats.cols();
    let k = data.num_classes();
    let mut sums = vec![0.0f64; k * h];
    for (i, &y) in data.labels().iter().enumerate() {
        for (j, &v) in feats.row(i).iter().enumerate() {
            sums[y * h + j] += v as f64;
        }
    }
    let mut out = Vec::with_capacity(k * h);
    for y in 0..k {
        let n = data.class_counts()[y] as f64;
        out.extend(sums[y * h..(y + 1) * h].iter().map(|&s| (s / n) as f32));
    }
    Matrix::from_vec(k, h, out)
}

/// Builds the starting point for synthesis. Exposed so a zero-step run can
/// be compared against its initialization bit-for-bit.
///
/// `input_means` supplies class means in *input* space for the
/// mean-plus-noise scheme. For a linear teacher the feature space is the
/// input space, so `stats` doubles as the fallback; a hidden-layer teacher
/// must provide `input_means` explicitly.
pub fn init_features(
    teacher: &MlpModel,
    stats: &Matrix,
    ipc: usize,
    cfg: &DistillConfig,
    input_means: Option<&Matrix>,
) -> Result<Matrix> {
    let k = teacher.num_classes();
    let d = teacher.input_dim();
    if ipc == 0 {
        return Err(Error::domain("ipc must be at least 1".to_string()));
    }
    let means: Option<&Matrix> = match (cfg.init, input_means) {
        (InitScheme::Noise, _) => None,
        (InitScheme::ClassMeanPlusNoise, Some(m)) => {
            if m.shape() != (k, d) {
                return Err(Error::domain(format!(
                    "input means are {:?}, expected ({k}, {d})",
                    m.shape()
                )));
            }
            Some(m)
        }
        (InitScheme::ClassMeanPlusNoise, None) if teacher.is_linear() => {
            // Linear backbone: feature space == input space.
            Some(stats)
        }
        (InitScheme::ClassMeanPlusNoise, None) => {
            return Err(Error::domain(
                "mean-plus-noise initialization for a hidden-layer teacher needs input-space class means"
                    .to_string(),
            ));
        }
    };
    let sigma = match means {
        None => 1.0,
        Some(m) => {
            let ms: f64 = m.as_slice().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()
                / m.as_slice().len() as f64;
            let rms = ms.sqrt();
            if rms > 0.0 {
                0.1 * rms
            } else {
                0.1
            }
        }
    };
    let mut out = Matrix::zeros(k * ipc, d)?;
    for class in 0..k {
        let mut r = cfg.rng.child(class as u64);
        for item in 0..ipc {
            let row = out.row_mut(item * k + class);
            match means {
                None => {
                    for v in row.iter_mut() {
                        *v = r.normal() as f32;
                    }
                }
                Some(m) => {
                    for (v, &mu) in row.iter_mut().zip(m.row(class)) {
                        *v = mu + (sigma * r.normal()) as f32;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Mean per-item objective and per-item input gradients over the whole
/// synthetic set.
fn objective_and_grads(
    teacher: &MlpModel,
    x: &Matrix,
    labels: &[usize],
    stats: &Matrix,
    reg_weight: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let target = ProbVector::one_hot(y, teacher.num_classes())?;
        let anchor: Vec<f64> = stats.row(y).iter().map(|&v| v as f64).collect();
        let (obj, grad) =
            teacher.input_objective_and_grad(&x.row_f64(i), &target, &anchor, 1.0, reg_weight)?;
        total += obj;
        grads.push(grad);
    }
    Ok((total / labels.len() as f64, grads))
}

fn objective_only(
    teacher: &MlpModel,
    x: &Matrix,
    labels: &[usize],
    stats: &Matrix,
    reg_weight: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let target = ProbVector::one_hot(y, teacher.num_classes())?;
        let anchor: Vec<f64> = stats.row(y).iter().map(|&v| v as f64).collect();
        let (obj, _) =
            teacher.input_objective_and_grad(&x.row_f64(i), &target, &anchor, 1.0, 0.0)?;
        // Re-add the anchoring term without the gradient work.
        let feats: Vec<f64> = if teacher.is_linear() {
            x.row_f64(i)
        } else {
            let row = Matrix::from_vec(1, x.cols(), x.row(i).to_vec())?;
            teacher.extract_features(&row)?.row_f64(0)
        };
        let reg: f64 = feats
            .iter()
            .zip(&anchor)
            .map(|(&f, &a)| (f - a) * (f - a))
            .sum();
        total += obj + reg_weight * reg;
    }
    Ok(total / labels.len() as f64)
}

/// Synthesizes a balanced distilled set by gradient descent on the inputs.
///
/// Uses plain descent with backtracking: the working step size starts at
/// `cfg.learning_rate`, halves (at most 10 times per step) whenever a move
/// would increase the mean objective, and persists across steps. A step
/// that cannot find a decrease after 10 halvings leaves the inputs
/// unchanged, so the objective trace is non-increasing by construction.
pub fn distill_images(
    teacher: &MlpModel,
    stats: &Matrix,
    ipc: usize,
    cfg: &DistillConfig,
    input_means: Option<&Matrix>,
) -> Result<DistillRun> {
    cfg.validate()?;
    let k = teacher.num_classes();
    if stats.shape() != (k, teacher.feature_dim()) {
        return Err(Error::domain(format!(
            "stats are {:?}, teacher needs ({k}, {})",
            stats.shape(),
            teacher.feature_dim()
        )));
    }
    let mut x = init_features(teacher, stats, ipc, cfg, input_means)?;
    let labels: Vec<usize> = (0..k * ipc).map(|m| m % k).collect();

    let mut objective = objective_only(teacher, &x, &labels, stats, cfg.reg_weight)?;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    trace.push(objective);
    let mut lr = cfg.learning_rate;

    for step in 0..cfg.steps {
        let (_, grads) = objective_and_grads(teacher, &x, &labels, stats, cfg.reg_weight)
            .map_err(|e| step_context(e, step))?;
        let mut halvings = 0;
        loop {
            let mut candidate = x.clone();
            for (i, grad) in grads.iter().enumerate() {
                let row = candidate.row_mut(i);
                for (v, &g) in row.iter_mut().zip(grad) {
                    *v -= (lr * g) as f32;
                }
            }
            candidate.validate_finite().map_err(|e| step_context(e, step))?;
            let cand_obj = objective_only(teacher, &candidate, &labels, stats, cfg.reg_weight)
                .map_err(|e| step_context(e, step))?;
            if cand_obj <= objective {
                x = candidate;
                objective = cand_obj;
                break;
            }
            if halvings == 10 {
                // Too stiff at the current rate even after halving; skip
                // the move. The next step resumes from the reduced rate.
                break;
            }
            lr *= 0.5;
            halvings += 1;
        }
        trace.push(objective);
    }
    let set = DistilledSet::new(x, ipc, k)?;
    Ok(DistillRun { set, objective_trace: trace })
}

fn step_context(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::numeric(format!("synthesis step {step}: {msg}")),
        other => other,
    }
}

/// Finite-difference check of the synthesis objective's input gradient for
/// one item. `ce_weight = 0` isolates the quadratic anchoring term (exact
/// for a linear backbone); `ce_weight = 1` is the full objective.
pub fn input_grad_check(
    teacher: &MlpModel,
    x: &[f64],
    label: usize,
    reg_weight: f64,
    stats: &Matrix,
    ce_weight: f64,
    step: f64,
) -> Result<f64> {
    let target = ProbVector::one_hot(label, teacher.num_classes())?;
    let anchor: Vec<f64> = stats.row(label).iter().map(|&v| v as f64).collect();
    let (_, grad) = teacher.input_objective_and_grad(x, &target, &anchor, ce_weight, reg_weight)?;
    let obj = |xp: &[f64]| {
        teacher
            .input_objective_and_grad(xp, &target, &anchor, ce_weight, reg_weight)
            .map(|(o, _)| o)
            .unwrap_or(f64::NAN)
    };
    finite_diff_check(obj, x, &grad, step)
}
