//! Small feed-forward classifiers with hand-derived gradients.
//!
//! Two shapes are supported: a plain softmax-linear model (`H = 0`) and a
//! one-hidden-layer MLP with relu or tanh. Parameters live in `f64` so the
//! finite-difference checks resolve cleanly below 1e-4 relative error;
//! checkpoints round-trip through `f32` (see [`crate::io`]).
//!
//! Besides training, the model exposes the two gradient flavours the rest
//! of the pipeline needs: parameter gradients for SGD and input-space
//! gradients (cross-entropy plus a feature anchoring term) for
//! distillation.

use crate::longtail::LabeledSet;
use crate::numcore::{log_sum_exp, Matrix, ProbVector, RngStream};
use crate::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative as a function of the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            other => Err(Error::format(format!("unknown activation tag {other}"))),
        }
    }
}

/// Softmax classifier with an optional hidden layer.
///
/// `dims = (input, hidden, classes)`; `hidden == 0` selects the linear
/// model, in which case the "features" exposed to distillation are the raw
/// inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    input_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    activation: Activation,
    // Row-major [fan_in × fan_out]; w2/b2 are empty for the linear model.
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Parameter-shaped gradient buffers.
#[derive(Debug, Clone)]
pub struct Grads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Grads {
    fn zeros_like(m: &MlpModel) -> Self {
        Grads {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
        }
    }
}

/// Training targets: integer labels or per-row probability vectors.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Hard(&'a [usize]),
    /// N×K matrix whose rows are probability distributions.
    Soft(&'a Matrix),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Hard(labels) => labels.len(),
            Targets::Soft(m) => m.rows(),
        }
    }
}

/// Number of parameters for a `(input, hidden, classes)` shape.
pub fn param_count(input_dim: usize, hidden_dim: usize, num_classes: usize) -> usize {
    if hidden_dim == 0 {
        input_dim * num_classes + num_classes
    } else {
        input_dim * hidden_dim + hidden_dim + hidden_dim * num_classes + num_classes
    }
}

/// Glorot-uniform initialization: weights from
/// ±√(6 / (fan_in + fan_out)), biases zero. Deterministic per stream.
pub fn init_mlp(
    input_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    activation: Activation,
    rng: &RngStream,
) -> Result<MlpModel> {
    if input_dim == 0 || num_classes == 0 {
        return Err(Error::domain(format!(
            "model needs positive input and class dims, got {input_dim} and {num_classes}"
        )));
    }
    let mut r = rng.clone();
    let mut glorot = |fan_in: usize, fan_out: usize| -> Vec<f64> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..fan_in * fan_out)
            .map(|_| (r.uniform() * 2.0 - 1.0) * limit)
            .collect()
    };
    let (w1, b1, w2, b2) = if hidden_dim == 0 {
        (glorot(input_dim, num_classes), vec![0.0; num_classes], Vec::new(), Vec::new())
    } else {
        (
            glorot(input_dim, hidden_dim),
            vec![0.0; hidden_dim],
            glorot(hidden_dim, num_classes),
            vec![0.0; num_classes],
        )
    };
    Ok(MlpModel {
        input_dim,
        hidden_dim,
        num_classes,
        activation,
        w1,
        b1,
        w2,
        b2,
    })
}

/// Hidden state of one row's forward pass, kept for backprop.
struct RowForward {
    pre_hidden: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl MlpModel {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn is_linear(&self) -> bool {
        self.hidden_dim == 0
    }

    /// Dimensionality of the feature space exposed to distillation.
    pub fn feature_dim(&self) -> usize {
        if self.is_linear() {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }

    fn forward_row(&self, x: &[f64]) -> RowForward {
        let (d, h, k) = (self.input_dim, self.hidden_dim, self.num_classes);
        if h == 0 {
            let mut logits = self.b1.clone();
            for (i, &xi) in x.iter().enumerate() {
                let row = &self.w1[i * k..(i + 1) * k];
                for (l, &w) in logits.iter_mut().zip(row) {
                    *l += xi * w;
                }
            }
            RowForward { pre_hidden: Vec::new(), hidden: Vec::new(), logits }
        } else {
            let mut pre = self.b1.clone();
            for (i, &xi) in x.iter().enumerate() {
                let row = &self.w1[i * h..(i + 1) * h];
                for (p, &w) in pre.iter_mut().zip(row) {
                    *p += xi * w;
                }
            }
            let hidden: Vec<f64> = pre.iter().map(|&p| self.activation.apply(p)).collect();
            let mut logits = self.b2.clone();
            for (j, &hj) in hidden.iter().enumerate() {
                let row = &self.w2[j * k..(j + 1) * k];
                for (l, &w) in logits.iter_mut().zip(row) {
                    *l += hj * w;
                }
            }
            debug_assert_eq!(x.len(), d);
            RowForward { pre_hidden: pre, hidden, logits }
        }
    }

    /// Batch forward pass: logits (N×K) and backbone features (N×H, or the
    /// inputs themselves for the linear model).
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if x.cols() != self.input_dim {
            return Err(Error::domain(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.input_dim
            )));
        }
        let n = x.rows();
        let k = self.num_classes;
        let mut logits = Matrix::zeros(n, k)?;
        let mut features = if self.is_linear() {
            x.clone()
        } else {
            Matrix::zeros(n, self.hidden_dim)?
        };
        for i in 0..n {
            let fwd = self.forward_row(&x.row_f64(i));
            for (c, &z) in fwd.logits.iter().enumerate() {
                if !z.is_finite() {
                    return Err(Error::numeric(format!(
                        "output layer produced non-finite logit at row {i}, class {c}"
                    )));
                }
                logits.set(i, c, z as f32);
            }
            if !self.is_linear() {
                for (j, &hj) in fwd.hidden.iter().enumerate() {
                    features.set(i, j, hj as f32);
                }
            }
        }
        Ok((logits, features))
    }

    /// Backbone features only; identical code path to [`MlpModel::forward`].
    pub fn extract_features(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.1)
    }

    /// Per-row logits at full precision (the relabeling path, where the
    /// f32 round-trip of [`MlpModel::forward`] would be wasteful).
    pub fn logits_f64(&self, x: &Matrix) -> Result<Vec<Vec<f64>>> {
        if x.cols() != self.input_dim {
            return Err(Error::domain(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.input_dim
            )));
        }
        (0..x.rows())
            .map(|i| {
                let fwd = self.forward_row(&x.row_f64(i));
                if let Some(c) = fwd.logits.iter().position(|z| !z.is_finite()) {
                    return Err(Error::numeric(format!(
                        "output layer produced non-finite logit at row {i}, class {c}"
                    )));
                }
                Ok(fwd.logits)
            })
            .collect()
    }

    /// Softmax posterior for every row.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<ProbVector>> {
        self.logits_f64(x)?
            .into_iter()
            .map(|z| crate::numcore::softmax(&z))
            .collect()
    }

    /// Argmax class per row.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self
            .logits_f64(x)?
            .into_iter()
            .map(|z| {
                z.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                    .0
            })
            .collect())
    }

    fn target_row<'a>(&self, targets: &'a Targets, i: usize, scratch: &'a mut Vec<f64>) -> Result<&'a [f64]> {
        match targets {
            Targets::Hard(labels) => {
                let y = labels[i];
                if y >= self.num_classes {
                    return Err(Error::domain(format!(
                        "label {y} at row {i} out of range for {} classes",
                        self.num_classes
                    )));
                }
                scratch.clear();
                scratch.resize(self.num_classes, 0.0);
                scratch[y] = 1.0;
                Ok(scratch)
            }
            Targets::Soft(m) => {
                scratch.clear();
                scratch.extend(m.row(i).iter().map(|&v| v as f64));
                Ok(scratch)
            }
        }
    }

    /// Mean cross-entropy over the batch plus an L2 penalty
    /// `0.5 · weight_decay · Σ w²` on the weights (biases excluded), with
    /// matching hand-derived gradients.
    pub fn loss_and_grad(
        &self,
        x: &Matrix,
        targets: &Targets,
        weight_decay: f64,
    ) -> Result<(f64, Grads)> {
        if x.cols() != self.input_dim {
            return Err(Error::domain(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.input_dim
            )));
        }
        if targets.len() != x.rows() {
            return Err(Error::domain(format!(
                "{} target rows for {} input rows",
                targets.len(),
                x.rows()
            )));
        }
        if let Targets::Soft(m) = targets {
            if m.cols() != self.num_classes {
                return Err(Error::domain(format!(
                    "soft targets have {} columns, model has {} classes",
                    m.cols(),
                    self.num_classes
                )));
            }
        }
        let n = x.rows();
        let (h, k) = (self.hidden_dim, self.num_classes);
        let inv_n = 1.0 / n as f64;
        let mut grads = Grads::zeros_like(self);
        let mut loss = 0.0;
        let mut scratch = Vec::new();
        for i in 0..n {
            let xi = x.row_f64(i);
            let fwd = self.forward_row(&xi);
            if let Some(c) = fwd.logits.iter().position(|z| !z.is_finite()) {
                return Err(Error::numeric(format!(
                    "output layer produced non-finite logit at row {i}, class {c}"
                )));
            }
            let target = self.target_row(targets, i, &mut scratch)?;
            let lse = log_sum_exp(&fwd.logits)?;
            let dot: f64 = fwd.logits.iter().zip(target).map(|(&z, &t)| z * t).sum();
            loss += (lse - dot) * inv_n;

            // dL/dz = (softmax(z) − target) / N
            let dz: Vec<f64> = fwd
                .logits
                .iter()
                .zip(target)
                .map(|(&z, &t)| ((z - lse).exp() - t) * inv_n)
                .collect();

            if self.is_linear() {
                for (c, &g) in dz.iter().enumerate() {
                    grads.b1[c] += g;
                }
                for (d_idx, &xv) in xi.iter().enumerate() {
                    let row = &mut grads.w1[d_idx * k..(d_idx + 1) * k];
                    for (gw, &g) in row.iter_mut().zip(&dz) {
                        *gw += xv * g;
                    }
                }
            } else {
                for (c, &g) in dz.iter().enumerate() {
                    grads.b2[c] += g;
                }
                for (j, &hj) in fwd.hidden.iter().enumerate() {
                    let row = &mut grads.w2[j * k..(j + 1) * k];
                    for (gw, &g) in row.iter_mut().zip(&dz) {
                        *gw += hj * g;
                    }
                }
                // dL/da_j = Σ_c dz_c · w2[j,c]; then through the activation.
                let mut dpre = vec![0.0; h];
                for (j, dp) in dpre.iter_mut().enumerate() {
                    let row = &self.w2[j * k..(j + 1) * k];
                    let da: f64 = row.iter().zip(&dz).map(|(&w, &g)| w * g).sum();
                    *dp = da * self.activation.derivative(fwd.pre_hidden[j]);
                }
                for (j, &g) in dpre.iter().enumerate() {
                    grads.b1[j] += g;
                }
                for (d_idx, &xv) in xi.iter().enumerate() {
                    let row = &mut grads.w1[d_idx * h..(d_idx + 1) * h];
                    for (gw, &g) in row.iter_mut().zip(&dpre) {
                        *gw += xv * g;
                    }
                }
            }
        }
        if weight_decay > 0.0 {
            let mut penalty = 0.0;
            for (w, g) in self.w1.iter().zip(grads.w1.iter_mut()) {
                penalty += w * w;
                *g += weight_decay * w;
            }
            for (w, g) in self.w2.iter().zip(grads.w2.iter_mut()) {
                penalty += w * w;
                *g += weight_decay * w;
            }
            loss += 0.5 * weight_decay * penalty;
        }
        if !loss.is_finite() {
            return Err(Error::numeric(format!("batch loss is not finite: {loss}")));
        }
        Ok((loss, grads))
    }

    /// Objective and input-space gradient for one synthetic sample:
    ///
    /// `ce_weight · CE(softmax(f(x)), target) + reg_weight · ‖g(x) − anchor‖²`
    ///
    /// where `g` is the backbone feature map. This is the inner step of
    /// distillation; setting `ce_weight = 0` isolates the quadratic
    /// anchoring term.
    pub fn input_objective_and_grad(
        &self,
        x: &[f64],
        target: &ProbVector,
        feature_anchor: &[f64],
        ce_weight: f64,
        reg_weight: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if x.len() != self.input_dim {
            return Err(Error::domain(format!(
                "input has {} entries, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        if target.len() != self.num_classes {
            return Err(Error::domain(format!(
                "target has {} entries, model has {} classes",
                target.len(),
                self.num_classes
            )));
        }
        if feature_anchor.len() != self.feature_dim() {
            return Err(Error::domain(format!(
                "feature anchor has {} entries, feature space has {}",
                feature_anchor.len(),
                self.feature_dim()
            )));
        }
        let (d, h, k) = (self.input_dim, self.hidden_dim, self.num_classes);
        let fwd = self.forward_row(x);
        if let Some(c) = fwd.logits.iter().position(|z| !z.is_finite()) {
            return Err(Error::numeric(format!(
                "output layer produced non-finite logit at class {c}"
            )));
        }
        let lse = log_sum_exp(&fwd.logits)?;
        let dot: f64 = fwd.logits.iter().zip(target.iter()).map(|(&z, &t)| z * t).sum();
        let ce = lse - dot;

        let features: &[f64] = if self.is_linear() { x } else { &fwd.hidden };
        let resid: Vec<f64> = features
            .iter()
            .zip(feature_anchor)
            .map(|(&f, &a)| f - a)
            .collect();
        let reg: f64 = resid.iter().map(|r| r * r).sum();
        let objective = ce_weight * ce + reg_weight * reg;

        // dCE/dz = softmax − target, scaled by ce_weight.
        let dz: Vec<f64> = fwd
            .logits
            .iter()
            .zip(target.iter())
            .map(|(&z, &t)| ce_weight * ((z - lse).exp() - t))
            .collect();

        let mut dx = vec![0.0; d];
        if self.is_linear() {
            // z = xW + b, features = x: dx = W·dz + 2λ(x − anchor).
            for (d_idx, dxi) in dx.iter_mut().enumerate() {
                let row = &self.w1[d_idx * k..(d_idx + 1) * k];
                *dxi = row.iter().zip(&dz).map(|(&w, &g)| w * g).sum::<f64>()
                    + 2.0 * reg_weight * resid[d_idx];
            }
        } else {
            // Gradient reaching each hidden activation: from CE via W2 and
            // from the anchoring term directly.
            let mut dpre = vec![0.0; h];
            for (j, dp) in dpre.iter_mut().enumerate() {
                let row = &self.w2[j * k..(j + 1) * k];
                let da: f64 = row.iter().zip(&dz).map(|(&w, &g)| w * g).sum::<f64>()
                    + 2.0 * reg_weight * resid[j];
                *dp = da * self.activation.derivative(fwd.pre_hidden[j]);
            }
            for (d_idx, dxi) in dx.iter_mut().enumerate() {
                let row = &self.w1[d_idx * h..(d_idx + 1) * h];
                *dxi = row.iter().zip(&dpre).map(|(&w, &g)| w * g).sum();
            }
        }
        if !objective.is_finite() {
            return Err(Error::numeric(format!("distillation objective is not finite: {objective}")));
        }
        Ok((objective, dx))
    }

    /// Flat parameter vector in layer order (w1, b1, w2, b2).
    pub fn params_f64(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(param_count(self.input_dim, self.hidden_dim, self.num_classes));
        p.extend(&self.w1);
        p.extend(&self.b1);
        p.extend(&self.w2);
        p.extend(&self.b2);
        p
    }

    /// Overwrites parameters from a flat vector in layer order.
    pub fn set_params_f64(&mut self, params: &[f64]) -> Result<()> {
        let expected = param_count(self.input_dim, self.hidden_dim, self.num_classes);
        if params.len() != expected {
            return Err(Error::domain(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        if let Some(bad) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::domain(format!("parameter {bad} is not finite")));
        }
        let mut it = params.iter();
        for w in self.w1.iter_mut() {
            *w = *it.next().unwrap();
        }
        for b in self.b1.iter_mut() {
            *b = *it.next().unwrap();
        }
        for w in self.w2.iter_mut() {
            *w = *it.next().unwrap();
        }
        for b in self.b2.iter_mut() {
            *b = *it.next().unwrap();
        }
        Ok(())
    }

    /// Parameters rounded to f32 in layer order — the checkpoint payload.
    pub fn params_f32(&self) -> Vec<f32> {
        self.params_f64().iter().map(|&p| p as f32).collect()
    }

    /// Rebuilds a model from checkpoint fields.
    pub fn from_params_f32(
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        activation: Activation,
        params: &[f32],
    ) -> Result<MlpModel> {
        let expected = param_count(input_dim, hidden_dim, num_classes);
        if params.len() != expected {
            return Err(Error::format(format!(
                "checkpoint holds {} parameters, shape ({input_dim},{hidden_dim},{num_classes}) needs {expected}",
                params.len()
            )));
        }
        let mut model = init_mlp(input_dim, hidden_dim, num_classes, activation, &RngStream::new(0))?;
        let params_f64: Vec<f64> = params.iter().map(|&p| p as f64).collect();
        model.set_params_f64(&params_f64)?;
        Ok(model)
    }

    /// Stable 64-bit digest of shape, activation, and f32-rounded
    /// parameters; embedded in soft-label artifacts so a stale teacher is
    /// detectable.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = Sha256::new();
        for dim in [self.input_dim, self.hidden_dim, self.num_classes] {
            hasher.update((dim as u32).to_le_bytes());
        }
        hasher.update([self.activation.tag()]);
        for p in self.params_f32() {
            hasher.update(p.to_le_bytes());
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
    }
}

/// What a training run consumes.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    /// Features with integer labels.
    Hard(&'a LabeledSet),
    /// Fixed features with one soft-target matrix per label epoch; epoch
    /// `e` trains against `slices[e % slices.len()]`.
    SoftSlices {
        features: &'a Matrix,
        slices: &'a [Matrix],
    },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// May be zero: a zero-rate run is the identity on parameters.
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Class-balanced resampling: each epoch draws every class equally
    /// often (with replacement within a class).
    pub resample: bool,
    pub rng: RngStream,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::domain("training needs at least one epoch".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch size must be at least 1".to_string()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::domain(format!(
                "weight decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// A finished training run: the model plus the per-step loss trace (used
/// for the did-it-learn sanity checks and run reports).
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: MlpModel,
    pub step_losses: Vec<f64>,
}

/// Epoch ordering for class-balanced resampling: class slots are dealt
/// round-robin (so per-class slot counts differ by at most one), the slot
/// order is shuffled, and each slot draws a row of its class uniformly
/// with replacement.
pub fn balanced_resample_order(labels: &[usize], num_classes: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    if let Some(k) = by_class.iter().position(|c| c.is_empty()) {
        return Err(Error::domain(format!(
            "class {k} has no samples; balanced resampling would never terminate"
        )));
    }
    let n = labels.len();
    let mut slots: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    rng.shuffle(&mut slots);
    Ok(slots
        .into_iter()
        .map(|k| {
            let pool = &by_class[k];
            pool[rng.below(pool.len())]
        })
        .collect())
}

/// Plain SGD with momentum over shuffled mini-batches.
///
/// The incomplete final batch of each epoch is dropped, so the step count
/// is `epochs · ⌊N / batch_size⌋` exactly. Deterministic per `cfg.rng`.
pub fn train(model: MlpModel, data: &TrainData, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let (features, labels_owned, soft_slices): (&Matrix, Option<&[usize]>, Option<&[Matrix]>) =
        match data {
            TrainData::Hard(set) => {
                if set.is_empty() {
                    return Err(Error::domain("training set is empty".to_string()));
                }
                (set.features(), Some(set.labels()), None)
            }
            TrainData::SoftSlices { features, slices } => {
                if slices.is_empty() {
                    return Err(Error::domain("soft training needs at least one label slice".to_string()));
                }
                for (s, slice) in slices.iter().enumerate() {
                    if slice.shape() != (features.rows(), model.num_classes()) {
                        return Err(Error::domain(format!(
                            "label slice {s} is {:?}, expected ({}, {})",
                            slice.shape(),
                            features.rows(),
                            model.num_classes()
                        )));
                    }
                }
                (features, None, Some(*slices))
            }
        };
    let n = features.rows();
    if cfg.batch_size > n {
        return Err(Error::domain(format!(
            "batch size {} exceeds the {} available samples; no full batch exists",
            cfg.batch_size, n
        )));
    }
    if cfg.resample && labels_owned.is_none() {
        return Err(Error::domain(
            "balanced resampling needs hard labels; soft slices carry no class identity".to_string(),
        ));
    }

    let mut model = model;
    let mut rng = cfg.rng.clone();
    let mut velocity = Grads::zeros_like(&model);
    let steps_per_epoch = n / cfg.batch_size;
    let mut step_losses = Vec::with_capacity(cfg.epochs * steps_per_epoch);

    for epoch in 0..cfg.epochs {
        let order: Vec<usize> = if cfg.resample {
            balanced_resample_order(labels_owned.unwrap(), model.num_classes(), &mut rng)?
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            idx
        };
        let slice = soft_slices.map(|s| &s[epoch % s.len()]);
        for batch in order.chunks_exact(cfg.batch_size) {
            let x = features.gather_rows(batch)?;
            let hard_batch: Vec<usize>;
            let soft_batch: Matrix;
            let targets = match (labels_owned, slice) {
                (Some(labels), None) => {
                    hard_batch = batch.iter().map(|&i| labels[i]).collect();
                    Targets::Hard(&hard_batch)
                }
                (None, Some(m)) => {
                    soft_batch = m.gather_rows(batch)?;
                    Targets::Soft(&soft_batch)
                }
                _ => unreachable!("TrainData variants fix exactly one target source"),
            };
            let (loss, grads) = model.loss_and_grad(&x, &targets, cfg.weight_decay).map_err(|e| {
                match e {
                    Error::Numeric(msg) => {
                        Error::numeric(format!("step {}: {msg}", step_losses.len()))
                    }
                    other => other,
                }
            })?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "training diverged at step {}: loss {loss}",
                    step_losses.len()
                )));
            }
            step_losses.push(loss);
            apply_sgd_step(&mut model, &mut velocity, &grads, cfg.learning_rate, cfg.momentum);
        }
    }
    Ok(TrainRun { model, step_losses })
}

fn apply_sgd_step(model: &mut MlpModel, velocity: &mut Grads, grads: &Grads, lr: f64, momentum: f64) {
    let update = |p: &mut [f64], v: &mut [f64], g: &[f64]| {
        for ((pi, vi), &gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    };
    update(&mut model.w1, &mut velocity.w1, &grads.w1);
    update(&mut model.b1, &mut velocity.b1, &grads.b1);
    update(&mut model.w2, &mut velocity.w2, &grads.w2);
    update(&mut model.b2, &mut velocity.b2, &grads.b2);
}
