//! Per-epoch soft labels for distilled items.
//!
//! The relabeling stage runs the (frozen) teacher over the synthetic
//! inputs once per *label epoch*, optionally adding fresh Gaussian input
//! jitter each time so the label slices differ. A label budget of `k`
//! slices is stretched over any number of training epochs by the cyclic
//! schedule `epoch → epoch mod k`.
//!
//! Labels are stored as logits rather than probabilities so the
//! calibration stage can rescale them post hoc without precision loss;
//! ensemble combination, by contrast, is defined on calibrated
//! *probability* rows — the two orders genuinely differ and one test below
//! pins the distinction.

use crate::distill::DistilledSet;
use crate::model::MlpModel;
use crate::numcore::{softmax, Matrix, ProbVector, RngStream};
use crate::{Error, Result};

/// One slice per label epoch of teacher logits for a fixed distilled set.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSet {
    /// `slices[e]` is the M×K logit matrix of label epoch `e`.
    slices: Vec<Matrix>,
    jitter_sigma: f64,
    teacher_ids: Vec<u64>,
}

impl SoftLabelSet {
    pub fn new(slices: Vec<Matrix>, jitter_sigma: f64, teacher_ids: Vec<u64>) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::domain("a soft-label set needs at least one slice".to_string()));
        }
        if !(jitter_sigma >= 0.0 && jitter_sigma.is_finite()) {
            return Err(Error::domain(format!(
                "jitter sigma must be finite and non-negative, got {jitter_sigma}"
            )));
        }
        let shape = slices[0].shape();
        for (e, s) in slices.iter().enumerate() {
            if s.shape() != shape {
                return Err(Error::domain(format!(
                    "slice {e} is {:?}, expected {shape:?}",
                    s.shape()
                )));
            }
            s.validate_finite()?;
        }
        Ok(SoftLabelSet { slices, jitter_sigma, teacher_ids })
    }

    pub fn num_label_epochs(&self) -> usize {
        self.slices.len()
    }

    pub fn num_items(&self) -> usize {
        self.slices[0].rows()
    }

    pub fn num_classes(&self) -> usize {
        self.slices[0].cols()
    }

    pub fn jitter_sigma(&self) -> f64 {
        self.jitter_sigma
    }

    pub fn teacher_ids(&self) -> &[u64] {
        &self.teacher_ids
    }

    pub fn slice(&self, e: usize) -> &Matrix {
        &self.slices[e]
    }

    pub fn slices(&self) -> &[Matrix] {
        &self.slices
    }

    /// Softmax rows of one slice, at full precision.
    pub fn slice_probs(&self, e: usize) -> Result<Vec<ProbVector>> {
        if e >= self.slices.len() {
            return Err(Error::domain(format!(
                "label epoch {e} out of range for {} slices",
                self.slices.len()
            )));
        }
        (0..self.num_items())
            .map(|i| softmax(&self.slices[e].row_f64(i)))
            .collect()
    }
}

/// Runs the teacher over the distilled inputs once per label epoch.
///
/// Epoch `e` sees `x̃ + ε_e` with `ε_e ~ N(0, jitter_sigma²)` drawn from
/// the `e`-th child stream, so slices are independent of each other and of
/// how many there are. Zero jitter short-circuits to identical slices.
pub fn relabel(
    teacher: &MlpModel,
    dd: &DistilledSet,
    label_epochs: usize,
    jitter_sigma: f64,
    rng: &RngStream,
) -> Result<SoftLabelSet> {
    if label_epochs == 0 {
        return Err(Error::domain("relabeling needs at least one label epoch".to_string()));
    }
    if !(jitter_sigma >= 0.0 && jitter_sigma.is_finite()) {
        return Err(Error::domain(format!(
            "jitter sigma must be finite and non-negative, got {jitter_sigma}"
        )));
    }
    if dd.dim() != teacher.input_dim() {
        return Err(Error::domain(format!(
            "distilled items have dim {}, teacher expects {}",
            dd.dim(),
            teacher.input_dim()
        )));
    }
    if dd.num_classes() != teacher.num_classes() {
        return Err(Error::domain(format!(
            "distilled set has {} classes, teacher has {}",
            dd.num_classes(),
            teacher.num_classes()
        )));
    }
    let mut slices = Vec::with_capacity(label_epochs);
    for e in 0..label_epochs {
        let inputs = if jitter_sigma == 0.0 {
            dd.features().clone()
        } else {
            let mut jittered = dd.features().clone();
            let mut r = rng.child(e as u64);
            for v in jittered.as_mut_slice() {
                *v += (jitter_sigma * r.normal()) as f32;
            }
            jittered
        };
        let (logits, _) = teacher.forward(&inputs)?;
        slices.push(logits);
    }
    SoftLabelSet::new(slices, jitter_sigma, vec![teacher.fingerprint()])
}

/// Which label slice a training epoch uses: `epoch mod k`.
pub fn epk_schedule(label_epochs: usize, train_epoch: usize) -> Result<usize> {
    if label_epochs == 0 {
        return Err(Error::domain("label budget must be at least 1".to_string()));
    }
    Ok(train_epoch % label_epochs)
}

/// Probability rows for the whole distilled set (one entry per item).
pub type ProbRows = Vec<ProbVector>;

/// Element-wise arithmetic mean of probability slices from several
/// teachers. Operates strictly in probability space — averaging logits
/// first would favour confident teachers (see the order-matters test).
pub fn ensemble_mean_probs(slices: &[ProbRows]) -> Result<ProbRows> {
    if slices.is_empty() {
        return Err(Error::domain("ensemble mean needs at least one slice".to_string()));
    }
    let m = slices[0].len();
    if m == 0 {
        return Err(Error::domain("ensemble slices must be non-empty".to_string()));
    }
    let k = slices[0][0].len();
    for (s, slice) in slices.iter().enumerate() {
        if slice.len() != m {
            return Err(Error::domain(format!(
                "slice {s} has {} rows, expected {m}",
                slice.len()
            )));
        }
        if let Some(bad) = slice.iter().position(|row| row.len() != k) {
            return Err(Error::domain(format!(
                "slice {s} row {bad} has {} classes, expected {k}",
                slice[bad].len()
            )));
        }
    }
    let inv = 1.0 / slices.len() as f64;
    (0..m)
        .map(|i| {
            let mut mean = vec![0.0f64; k];
            for slice in slices {
                for (acc, &p) in mean.iter_mut().zip(slice[i].iter()) {
                    *acc += p * inv;
                }
            }
            ProbVector::new(mean)
        })
        .collect()
}
