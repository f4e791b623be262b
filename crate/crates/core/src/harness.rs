//! End-to-end experiment orchestration.
//!
//! This module wires the building blocks into runnable experiments:
//!
//! * the four perturbation configurations that cross imbalanced/balanced
//!   image sources with imbalanced/balanced labelers, so the two bias
//!   channels of the pipeline can be separated;
//! * evaluation-model training on a distilled set under (raw or
//!   calibrated) soft labels, scored on a balanced held-out test set;
//! * metric computation — per-class accuracy, mean ground-truth
//!   confidence, mean prediction entropy, and head/mid/tail aggregates;
//! * the additive bias decomposition `p_obs = p_target + ε_T + ε_I +
//!   residual`, where the residual is defined as the closure term, so
//!   additivity is measured rather than assumed.
//!
//! Every run is a pure function of its spec and seed: all randomness flows
//! through numbered child streams of one root, so two runs with the same
//! inputs produce bit-identical reports.

use std::collections::BTreeMap;

use crate::adsa::{calibrate_softlabel_set, optimize_tau_multi, TauGrid};
use crate::distill::{class_feature_stats, distill_images, DistillConfig, DistilledSet, InitScheme};
use crate::longtail::{
    class_prior, gaussian_mixture_generate, perturbation_counts, LabeledSet, LongTailSpec,
    MixtureSpec,
};
use crate::model::{init_mlp, train, Activation, MlpModel, TrainConfig, TrainData};
use crate::numcore::{shannon_entropy, Matrix, RngStream};
use crate::softlabel::{ensemble_mean_probs, relabel, ProbRows, SoftLabelSet};
use crate::{Error, Result};

/// One of the four image-source × labeler crossings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PerturbationConfigId {
    /// Imbalanced images, balanced labeler.
    C1,
    /// Balanced images, imbalanced labeler.
    C2,
    /// Imbalanced images, imbalanced labeler.
    C3,
    /// Balanced images, balanced labeler (the control).
    C4,
}

impl PerturbationConfigId {
    pub fn all() -> [PerturbationConfigId; 4] {
        [Self::C1, Self::C2, Self::C3, Self::C4]
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::C1 => "C1",
            Self::C2 => "C2",
            Self::C3 => "C3",
            Self::C4 => "C4",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Self::C1 => "imbalanced images, balanced labeler",
            Self::C2 => "balanced images, imbalanced labeler",
            Self::C3 => "imbalanced images, imbalanced labeler",
            Self::C4 => "balanced images, balanced labeler",
        }
    }

    pub fn images_imbalanced(self) -> bool {
        matches!(self, Self::C1 | Self::C3)
    }

    pub fn labeler_imbalanced(self) -> bool {
        matches!(self, Self::C2 | Self::C3)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "C1" => Ok(Self::C1),
            "C2" => Ok(Self::C2),
            "C3" => Ok(Self::C3),
            "C4" => Ok(Self::C4),
            other => Err(Error::domain(format!(
                "unknown perturbation config {other:?}, expected C1..C4"
            ))),
        }
    }
}

/// Head/mid/tail membership of a class, by its training sample count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitBand {
    Head,
    Mid,
    Tail,
}

impl SplitBand {
    pub fn name(self) -> &'static str {
        match self {
            SplitBand::Head => "head",
            SplitBand::Mid => "mid",
            SplitBand::Tail => "tail",
        }
    }
}

/// Absolute sample-count thresholds separating head/mid/tail classes.
///
/// The reference protocol uses head ≥ 100 and mid ≥ 20 on datasets whose
/// largest class holds [`SplitThresholds::REFERENCE_MAX_COUNT`] samples.
/// Desk-scale fixtures are much smaller, so [`SplitThresholds::scaled_to`]
/// rescales both thresholds proportionally to the actual largest class
/// (`threshold × max_count / reference_max`) to keep all three bands
/// populated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitThresholds {
    /// Classes with at least this many training samples are head.
    pub head_min: usize,
    /// Classes below `head_min` but at least this are mid; the rest tail.
    pub mid_min: usize,
}

impl SplitThresholds {
    pub const REFERENCE: SplitThresholds = SplitThresholds { head_min: 100, mid_min: 20 };

    /// Largest per-class count of the protocol the reference thresholds
    /// were written for (an imbalance-100 exponential profile).
    pub const REFERENCE_MAX_COUNT: usize = 500;

    pub fn new(head_min: usize, mid_min: usize) -> Result<Self> {
        if mid_min == 0 || head_min <= mid_min {
            return Err(Error::domain(format!(
                "split thresholds need head_min > mid_min >= 1, got {head_min} and {mid_min}"
            )));
        }
        Ok(SplitThresholds { head_min, mid_min })
    }

    /// Rescales the reference thresholds to a fixture whose largest class
    /// has `max_count` samples.
    pub fn scaled_to(max_count: usize) -> Self {
        let scale = |t: usize| -> usize {
            let scaled = (t * max_count) as f64 / Self::REFERENCE_MAX_COUNT as f64;
            (scaled.round() as usize).max(1)
        };
        let mid_min = scale(Self::REFERENCE.mid_min);
        let head_min = scale(Self::REFERENCE.head_min).max(mid_min + 1);
        SplitThresholds { head_min, mid_min }
    }

    pub fn band(&self, train_count: usize) -> SplitBand {
        if train_count >= self.head_min {
            SplitBand::Head
        } else if train_count >= self.mid_min {
            SplitBand::Mid
        } else {
            SplitBand::Tail
        }
    }
}

/// Everything measured about one trained model on one test set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class_accuracy: Vec<f64>,
    /// Mean predicted probability of the ground-truth class.
    pub per_class_confidence: Vec<f64>,
    /// Mean Shannon entropy of the predicted distribution.
    pub per_class_entropy: Vec<f64>,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub splits: Vec<SplitBand>,
    pub overall_accuracy: f64,
    /// `None` when the band holds no classes.
    pub head_accuracy: Option<f64>,
    pub mid_accuracy: Option<f64>,
    pub tail_accuracy: Option<f64>,
    /// Every knob and seed that went into producing this report.
    pub manifest: BTreeMap<String, String>,
}

pub const METRICS_CSV_HEADER: &str =
    "run_id,config,seed,class,train_count,split,accuracy,confidence,entropy";
pub const SUMMARY_CSV_HEADER: &str = "run_id,overall_acc,head_acc,mid_acc,tail_acc,tau_star";

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "nan".to_string(),
    }
}

impl MetricsReport {
    pub fn num_classes(&self) -> usize {
        self.per_class_accuracy.len()
    }

    /// Per-class rows under [`METRICS_CSV_HEADER`].
    pub fn metrics_csv_rows(&self, run_id: &str, config: &str, seed: u64) -> Vec<String> {
        (0..self.num_classes())
            .map(|c| {
                format!(
                    "{run_id},{config},{seed},{c},{},{},{},{},{}",
                    self.train_counts[c],
                    self.splits[c].name(),
                    self.per_class_accuracy[c],
                    self.per_class_confidence[c],
                    self.per_class_entropy[c],
                )
            })
            .collect()
    }

    /// One row under [`SUMMARY_CSV_HEADER`].
    pub fn summary_csv_row(&self, run_id: &str, tau_star: Option<f64>) -> String {
        format!(
            "{run_id},{},{},{},{},{}",
            self.overall_accuracy,
            fmt_opt(self.head_accuracy),
            fmt_opt(self.mid_accuracy),
            fmt_opt(self.tail_accuracy),
            fmt_opt(tau_star),
        )
    }
}

/// Renders a manifest as sorted `key = value` lines (BTreeMap order), so
/// equal manifests serialize to equal bytes.
pub fn manifest_to_string(manifest: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in manifest {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

fn weighted_mean_where(
    values: &[f64],
    weights: &[usize],
    mut include: impl FnMut(usize) -> bool,
) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, (&v, &w)) in values.iter().zip(weights).enumerate() {
        if include(c) {
            num += v * w as f64;
            den += w as f64;
        }
    }
    if den > 0.0 {
        Some(num / den)
    } else {
        None
    }
}

/// Mean of `values` over the listed class indices.
pub fn mean_over_classes(values: &[f64], classes: &[usize]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::domain("cannot average over an empty class list".to_string()));
    }
    let mut acc = 0.0;
    for &c in classes {
        let v = values.get(c).ok_or_else(|| {
            Error::domain(format!("class {c} out of range for {} values", values.len()))
        })?;
        acc += v;
    }
    Ok(acc / classes.len() as f64)
}

/// Scores `model` on a test set that must cover every class.
///
/// `train_counts` are the per-class counts of the *training* distribution;
/// they choose the head/mid/tail bands and are echoed into the report.
pub fn compute_metrics(
    model: &MlpModel,
    test: &LabeledSet,
    train_counts: &[usize],
    thresholds: &SplitThresholds,
) -> Result<MetricsReport> {
    let k = model.num_classes();
    if test.num_classes() != k {
        return Err(Error::domain(format!(
            "test set has {} classes, model predicts {k}",
            test.num_classes()
        )));
    }
    if train_counts.len() != k {
        return Err(Error::domain(format!(
            "{} train counts for {k} classes",
            train_counts.len()
        )));
    }
    for (c, &n) in test.class_counts().iter().enumerate() {
        if n == 0 {
            return Err(Error::domain(format!("class {c} is absent from the test set")));
        }
    }

    let probs = model.predict_proba(test.features())?;
    let mut correct = vec![0usize; k];
    let mut conf_sum = vec![0.0f64; k];
    let mut ent_sum = vec![0.0f64; k];
    for (row, &label) in probs.iter().zip(test.labels()) {
        if row.argmax() == label {
            correct[label] += 1;
        }
        conf_sum[label] += row[label];
        ent_sum[label] += shannon_entropy(row);
    }
    let test_counts = test.class_counts().to_vec();
    let per_class_accuracy: Vec<f64> =
        correct.iter().zip(&test_counts).map(|(&c, &n)| c as f64 / n as f64).collect();
    let per_class_confidence: Vec<f64> =
        conf_sum.iter().zip(&test_counts).map(|(&s, &n)| s / n as f64).collect();
    let per_class_entropy: Vec<f64> =
        ent_sum.iter().zip(&test_counts).map(|(&s, &n)| s / n as f64).collect();
    let splits: Vec<SplitBand> = train_counts.iter().map(|&n| thresholds.band(n)).collect();

    let total_correct: usize = correct.iter().sum();
    let overall_accuracy = total_correct as f64 / test.len() as f64;
    let head_accuracy =
        weighted_mean_where(&per_class_accuracy, &test_counts, |c| splits[c] == SplitBand::Head);
    let mid_accuracy =
        weighted_mean_where(&per_class_accuracy, &test_counts, |c| splits[c] == SplitBand::Mid);
    let tail_accuracy =
        weighted_mean_where(&per_class_accuracy, &test_counts, |c| splits[c] == SplitBand::Tail);

    let mut manifest = BTreeMap::new();
    manifest.insert("metrics.num_classes".to_string(), k.to_string());
    manifest.insert("metrics.test_size".to_string(), test.len().to_string());
    manifest.insert("metrics.head_min".to_string(), thresholds.head_min.to_string());
    manifest.insert("metrics.mid_min".to_string(), thresholds.mid_min.to_string());
    manifest.insert("metrics.train_counts".to_string(), format!("{train_counts:?}"));

    Ok(MetricsReport {
        per_class_accuracy,
        per_class_confidence,
        per_class_entropy,
        train_counts: train_counts.to_vec(),
        test_counts,
        splits,
        overall_accuracy,
        head_accuracy,
        mid_accuracy,
        tail_accuracy,
        manifest,
    })
}

/// The additive bias split of observed soft-label tables.
///
/// `ε_I` is the image-channel bias (config C1 minus the C4 control), `ε_T`
/// the labeler-channel bias (C2 minus C4), and `residual` closes the sum
/// against the fully imbalanced C3 observation. A large residual means the
/// two channels do not add independently.
#[derive(Debug, Clone)]
pub struct BiasDecomposition {
    pub epsilon_t: Vec<Vec<f64>>,
    pub epsilon_i: Vec<Vec<f64>>,
    pub residual: Vec<Vec<f64>>,
}

impl BiasDecomposition {
    fn frobenius(table: &[Vec<f64>]) -> f64 {
        table.iter().flat_map(|r| r.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn epsilon_t_norm(&self) -> f64 {
        Self::frobenius(&self.epsilon_t)
    }

    pub fn epsilon_i_norm(&self) -> f64 {
        Self::frobenius(&self.epsilon_i)
    }

    pub fn residual_norm(&self) -> f64 {
        Self::frobenius(&self.residual)
    }

    /// Largest |row sum| across all three tables; differences of
    /// probability rows must sum to zero up to rounding.
    pub fn max_row_sum_magnitude(&self) -> f64 {
        [&self.epsilon_t, &self.epsilon_i, &self.residual]
            .iter()
            .flat_map(|t| t.iter())
            .map(|row| row.iter().sum::<f64>().abs())
            .fold(0.0, f64::max)
    }
}

fn check_table_shape(name: &str, table: &ProbRows, rows: usize, cols: usize) -> Result<()> {
    if table.len() != rows {
        return Err(Error::domain(format!(
            "{name} table has {} rows, expected {rows}",
            table.len()
        )));
    }
    for (i, r) in table.iter().enumerate() {
        if r.len() != cols {
            return Err(Error::domain(format!(
                "{name} row {i} has {} entries, expected {cols}",
                r.len()
            )));
        }
    }
    Ok(())
}

/// Splits the observed soft-label bias into labeler and image channels.
///
/// All four tables must be probability rows over the same distilled items.
/// `ε_I := p_C1 − p_C4`, `ε_T := p_C2 − p_C4`, and the residual is defined
/// as `p_C3 − (p_C4 + ε_T + ε_I)` so the decomposition reconstructs C3
/// exactly by construction.
pub fn bias_decomposition(
    p_c1: &ProbRows,
    p_c2: &ProbRows,
    p_c3: &ProbRows,
    p_c4: &ProbRows,
) -> Result<BiasDecomposition> {
    if p_c4.is_empty() {
        return Err(Error::domain("bias decomposition needs at least one row".to_string()));
    }
    let rows = p_c4.len();
    let cols = p_c4[0].len();
    check_table_shape("C1", p_c1, rows, cols)?;
    check_table_shape("C2", p_c2, rows, cols)?;
    check_table_shape("C3", p_c3, rows, cols)?;
    check_table_shape("C4", p_c4, rows, cols)?;

    let mut epsilon_t = Vec::with_capacity(rows);
    let mut epsilon_i = Vec::with_capacity(rows);
    let mut residual = Vec::with_capacity(rows);
    for i in 0..rows {
        let mut et = Vec::with_capacity(cols);
        let mut ei = Vec::with_capacity(cols);
        let mut res = Vec::with_capacity(cols);
        for j in 0..cols {
            let t = p_c2[i][j] - p_c4[i][j];
            let im = p_c1[i][j] - p_c4[i][j];
            et.push(t);
            ei.push(im);
            res.push(p_c3[i][j] - (p_c4[i][j] + t + im));
        }
        epsilon_t.push(et);
        epsilon_i.push(ei);
        residual.push(res);
    }
    Ok(BiasDecomposition { epsilon_t, epsilon_i, residual })
}

/// Shared knobs for every end-to-end run: data geometry, model shapes, and
/// the budgets of each pipeline stage.
#[derive(Debug, Clone)]
pub struct PipelineSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Standard deviation of the random class means (unit-variance
    /// clusters), i.e. how separable the classes are.
    pub separation: f64,
    /// 0 trains linear models end to end.
    pub hidden_dim: usize,
    pub activation: Activation,
    pub ipc: usize,
    pub test_per_class: usize,
    pub teacher_epochs: usize,
    pub teacher_batch: usize,
    pub teacher_lr: f64,
    pub teacher_weight_decay: f64,
    pub momentum: f64,
    pub distill_steps: usize,
    pub distill_lr: f64,
    pub distill_reg_weight: f64,
    /// Number of soft-label slices (one teacher pass per label epoch).
    pub label_epochs: usize,
    pub jitter_sigma: f64,
    pub eval_epochs: usize,
    pub eval_batch: usize,
    pub eval_lr: f64,
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::domain("pipeline needs at least 2 classes".to_string()));
        }
        if self.dim == 0 || self.ipc == 0 || self.test_per_class == 0 || self.label_epochs == 0 {
            return Err(Error::domain(
                "dim, ipc, test_per_class, and label_epochs must all be positive".to_string(),
            ));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::domain(format!(
                "class separation must be positive, got {}",
                self.separation
            )));
        }
        Ok(())
    }

    /// A deliberately small default every harness experiment starts from;
    /// runs in milliseconds per seed on a laptop-class machine.
    pub fn small_fixture() -> PipelineSpec {
        PipelineSpec {
            num_classes: 5,
            dim: 6,
            separation: 1.5,
            hidden_dim: 0,
            activation: Activation::Relu,
            ipc: 10,
            test_per_class: 100,
            teacher_epochs: 30,
            teacher_batch: 16,
            teacher_lr: 0.1,
            teacher_weight_decay: 1e-4,
            momentum: 0.9,
            distill_steps: 60,
            distill_lr: 0.5,
            distill_reg_weight: 0.05,
            label_epochs: 4,
            jitter_sigma: 0.0,
            eval_epochs: 40,
            eval_batch: 10,
            eval_lr: 0.1,
        }
    }

    fn describe_into(&self, prefix: &str, manifest: &mut BTreeMap<String, String>) {
        let mut put = |k: &str, v: String| {
            manifest.insert(format!("{prefix}.{k}"), v);
        };
        put("num_classes", self.num_classes.to_string());
        put("dim", self.dim.to_string());
        put("separation", self.separation.to_string());
        put("hidden_dim", self.hidden_dim.to_string());
        put("activation", format!("{:?}", self.activation));
        put("ipc", self.ipc.to_string());
        put("test_per_class", self.test_per_class.to_string());
        put("teacher_epochs", self.teacher_epochs.to_string());
        put("teacher_batch", self.teacher_batch.to_string());
        put("teacher_lr", self.teacher_lr.to_string());
        put("teacher_weight_decay", self.teacher_weight_decay.to_string());
        put("momentum", self.momentum.to_string());
        put("distill_steps", self.distill_steps.to_string());
        put("distill_lr", self.distill_lr.to_string());
        put("distill_reg_weight", self.distill_reg_weight.to_string());
        put("label_epochs", self.label_epochs.to_string());
        put("jitter_sigma", self.jitter_sigma.to_string());
        put("eval_epochs", self.eval_epochs.to_string());
        put("eval_batch", self.eval_batch.to_string());
        put("eval_lr", self.eval_lr.to_string());
    }
}

fn train_teacher(spec: &PipelineSpec, data: &LabeledSet, rng: &RngStream) -> Result<MlpModel> {
    let model = init_mlp(
        spec.dim,
        spec.hidden_dim,
        spec.num_classes,
        spec.activation,
        &rng.child(0),
    )?;
    let cfg = TrainConfig {
        epochs: spec.teacher_epochs,
        batch_size: spec.teacher_batch,
        learning_rate: spec.teacher_lr,
        momentum: spec.momentum,
        weight_decay: spec.teacher_weight_decay,
        resample: false,
        rng: rng.child(1),
    };
    Ok(train(model, &TrainData::Hard(data), &cfg)?.model)
}

/// K×D matrix of per-class input means — the anchor a mean-plus-noise
/// distillation init needs when the teacher has a hidden layer (its
/// feature stats then live in the wrong space).
pub fn class_input_means(data: &LabeledSet) -> Result<Matrix> {
    let k = data.num_classes();
    let d = data.dim();
    let mut out = Matrix::zeros(k, d)?;
    for c in 0..k {
        let mean = data.class_mean(c)?;
        for (j, v) in mean.iter().enumerate() {
            out.set(c, j, *v as f32);
        }
    }
    Ok(out)
}

fn distill_from(
    spec: &PipelineSpec,
    teacher: &MlpModel,
    data: &LabeledSet,
    rng: &RngStream,
) -> Result<DistilledSet> {
    let stats = class_feature_stats(teacher, data)?;
    let cfg = DistillConfig {
        steps: spec.distill_steps,
        learning_rate: spec.distill_lr,
        reg_weight: spec.distill_reg_weight,
        init: InitScheme::ClassMeanPlusNoise,
        rng: rng.clone(),
    };
    let input_means =
        if spec.hidden_dim > 0 { Some(class_input_means(data)?) } else { None };
    Ok(distill_images(teacher, &stats, spec.ipc, &cfg, input_means.as_ref())?.set)
}

/// Converts raw soft-label logits to one probability matrix per slice
/// (plain softmax — exactly what an uncalibrated consumer sees).
pub fn raw_label_matrices(sl: &SoftLabelSet) -> Result<Vec<Matrix>> {
    (0..sl.num_label_epochs())
        .map(|e| {
            let rows = sl.slice_probs(e)?;
            prob_rows_to_matrix(&rows)
        })
        .collect()
}

fn prob_rows_to_matrix(rows: &ProbRows) -> Result<Matrix> {
    if rows.is_empty() {
        return Err(Error::domain("cannot build a matrix from zero rows".to_string()));
    }
    let cols = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        if r.len() != cols {
            return Err(Error::domain("ragged probability rows".to_string()));
        }
        data.extend(r.iter().map(|&v| v as f32));
    }
    Matrix::from_vec(rows.len(), cols, data)
}

/// Trains an evaluation model on a distilled set under soft-label slices
/// and scores it on the balanced test set.
///
/// The caller provides the initialized `model` so paired comparisons (raw
/// vs calibrated labels) can share one starting point and one batch
/// order. `schedule_k` selects how many of the leading slices cycle during
/// training (epoch `e` consumes slice `e mod schedule_k`).
pub fn train_eval_model(
    model: MlpModel,
    dd: &DistilledSet,
    label_slices: &[Matrix],
    schedule_k: usize,
    cfg: &TrainConfig,
    test: &LabeledSet,
    train_counts: &[usize],
    thresholds: &SplitThresholds,
) -> Result<(MlpModel, MetricsReport)> {
    if schedule_k == 0 || schedule_k > label_slices.len() {
        return Err(Error::domain(format!(
            "schedule must use between 1 and {} label slices, got {schedule_k}",
            label_slices.len()
        )));
    }
    for (e, s) in label_slices.iter().enumerate() {
        if s.shape() != (dd.len(), dd.num_classes()) {
            return Err(Error::domain(format!(
                "label slice {e} is {:?}, distilled set needs ({}, {})",
                s.shape(),
                dd.len(),
                dd.num_classes()
            )));
        }
    }
    let data = TrainData::SoftSlices {
        features: dd.features(),
        slices: &label_slices[..schedule_k],
    };
    let run = train(model, &data, cfg)?;
    let mut report = compute_metrics(&run.model, test, train_counts, thresholds)?;
    report.manifest.insert("eval.schedule_k".to_string(), schedule_k.to_string());
    report.manifest.insert("eval.epochs".to_string(), cfg.epochs.to_string());
    Ok((run.model, report))
}

/// One (config, seed) cell of the perturbation protocol.
#[derive(Debug, Clone)]
pub struct PerturbationRun {
    pub config: PerturbationConfigId,
    pub seed: u64,
    pub varied_count: usize,
    pub metrics: MetricsReport,
    /// Test-set metrics averaged over the varied classes (indices `0..V`).
    pub varied_accuracy: f64,
    pub unvaried_accuracy: f64,
    pub varied_confidence: f64,
    pub unvaried_confidence: f64,
    /// Mean soft-label entropy of distilled rows, by varied membership.
    pub varied_label_entropy: f64,
    pub unvaried_label_entropy: f64,
    /// Raw soft-label probability table (slice-ensemble mean), one row per
    /// distilled item — the input to [`bias_decomposition`].
    pub label_table: ProbRows,
}

/// Runs one perturbation configuration across seeds.
///
/// Per seed: the imbalanced profile fixes the first `num_varied` classes
/// at `varied_count` samples and spreads the rest of `total_budget`
/// evenly; the balanced profile gives every class `total_budget /
/// num_classes`. Both teachers are trained fresh for the configuration,
/// the image teacher distills, the label teacher relabels, and an
/// evaluation model is scored on a balanced test set.
pub fn run_perturbation(
    config: PerturbationConfigId,
    varied_count: usize,
    spec: &PipelineSpec,
    total_budget: usize,
    num_varied: usize,
    seeds: &[u64],
) -> Result<Vec<PerturbationRun>> {
    spec.validate()?;
    if seeds.is_empty() {
        return Err(Error::domain("need at least one seed".to_string()));
    }
    if total_budget % spec.num_classes != 0 {
        return Err(Error::domain(format!(
            "total budget {total_budget} must divide evenly into {} classes so the balanced \
             control uses the same budget",
            spec.num_classes
        )));
    }
    if num_varied == 0 {
        return Err(Error::domain("need at least one varied class".to_string()));
    }
    let k = spec.num_classes;
    let imb_counts = perturbation_counts(varied_count, total_budget, num_varied, k)?;
    let bal_counts = perturbation_counts(total_budget / k, total_budget, num_varied, k)?;
    debug_assert!(bal_counts.iter().all(|&c| c == total_budget / k));

    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let root = RngStream::new(seed);
        let mixture = MixtureSpec::random_isotropic(k, spec.dim, spec.separation, &root.child(1))?;
        let image_counts = if config.images_imbalanced() { &imb_counts } else { &bal_counts };
        let label_counts = if config.labeler_imbalanced() { &imb_counts } else { &bal_counts };
        let image_data = gaussian_mixture_generate(&mixture, image_counts, &root.child(2))?;
        let label_data = gaussian_mixture_generate(&mixture, label_counts, &root.child(3))?;

        let image_teacher = train_teacher(spec, &image_data, &root.child(4))?;
        let label_teacher = train_teacher(spec, &label_data, &root.child(5))?;
        let dd = distill_from(spec, &image_teacher, &image_data, &root.child(6))?;
        let sl = relabel(&label_teacher, &dd, spec.label_epochs, spec.jitter_sigma, &root.child(7))?;
        let label_mats = raw_label_matrices(&sl)?;

        let eval_init =
            init_mlp(spec.dim, spec.hidden_dim, k, spec.activation, &root.child(8))?;
        let eval_cfg = TrainConfig {
            epochs: spec.eval_epochs,
            batch_size: spec.eval_batch,
            learning_rate: spec.eval_lr,
            momentum: spec.momentum,
            weight_decay: 0.0,
            resample: false,
            rng: root.child(9),
        };
        let test = gaussian_mixture_generate(&mixture, &vec![spec.test_per_class; k], &root.child(10))?;
        let thresholds = SplitThresholds::scaled_to(*image_counts.iter().max().unwrap());
        let (_, mut metrics) = train_eval_model(
            eval_init,
            &dd,
            &label_mats,
            spec.label_epochs,
            &eval_cfg,
            &test,
            image_counts,
            &thresholds,
        )?;

        metrics.manifest.insert("perturbation.config".to_string(), config.label().to_string());
        metrics
            .manifest
            .insert("perturbation.config_meaning".to_string(), config.describe().to_string());
        metrics.manifest.insert("perturbation.seed".to_string(), seed.to_string());
        metrics.manifest.insert("perturbation.varied_count".to_string(), varied_count.to_string());
        metrics.manifest.insert("perturbation.num_varied".to_string(), num_varied.to_string());
        metrics.manifest.insert("perturbation.total_budget".to_string(), total_budget.to_string());
        metrics
            .manifest
            .insert("perturbation.image_counts".to_string(), format!("{image_counts:?}"));
        metrics
            .manifest
            .insert("perturbation.label_counts".to_string(), format!("{label_counts:?}"));
        metrics.manifest.insert(
            "perturbation.image_teacher".to_string(),
            format!("{:016x}", image_teacher.fingerprint()),
        );
        metrics.manifest.insert(
            "perturbation.label_teacher".to_string(),
            format!("{:016x}", label_teacher.fingerprint()),
        );
        spec.describe_into("pipeline", &mut metrics.manifest);

        let varied: Vec<usize> = (0..num_varied).collect();
        let unvaried: Vec<usize> = (num_varied..k).collect();
        let slices_probs: Vec<ProbRows> = (0..sl.num_label_epochs())
            .map(|e| sl.slice_probs(e))
            .collect::<Result<_>>()?;
        let label_table = ensemble_mean_probs(&slices_probs)?;
        let mut ent_sum = [0.0f64; 2];
        let mut ent_n = [0usize; 2];
        for (row, &y) in label_table.iter().zip(dd.labels()) {
            let side = usize::from(y >= num_varied);
            ent_sum[side] += shannon_entropy(row);
            ent_n[side] += 1;
        }

        runs.push(PerturbationRun {
            config,
            seed,
            varied_count,
            varied_accuracy: mean_over_classes(&metrics.per_class_accuracy, &varied)?,
            unvaried_accuracy: mean_over_classes(&metrics.per_class_accuracy, &unvaried)?,
            varied_confidence: mean_over_classes(&metrics.per_class_confidence, &varied)?,
            unvaried_confidence: mean_over_classes(&metrics.per_class_confidence, &unvaried)?,
            varied_label_entropy: ent_sum[0] / ent_n[0].max(1) as f64,
            unvaried_label_entropy: ent_sum[1] / ent_n[1].max(1) as f64,
            label_table,
            metrics,
        });
    }
    Ok(runs)
}

/// Raw-vs-calibrated comparison on one long-tailed pipeline.
#[derive(Debug, Clone)]
pub struct AdsaComparison {
    pub seed: u64,
    pub tau_star: f64,
    pub raw: MetricsReport,
    pub calibrated: MetricsReport,
}

/// Runs the standard long-tailed pipeline once per seed and trains the
/// evaluation model twice — once on raw softmax labels, once on
/// prior-compensated labels at the searched τ* — from the same
/// initialization and batch order, so the label treatment is the only
/// difference.
pub fn run_adsa_comparison(
    spec: &PipelineSpec,
    base_count: usize,
    imbalance_factor: f64,
    grid: &TauGrid,
    seeds: &[u64],
) -> Result<Vec<AdsaComparison>> {
    spec.validate()?;
    if seeds.is_empty() {
        return Err(Error::domain("need at least one seed".to_string()));
    }
    let k = spec.num_classes;
    let counts = LongTailSpec::exponential(k, base_count, imbalance_factor)?.counts()?;
    let prior = class_prior(&counts)?;
    let thresholds = SplitThresholds::scaled_to(base_count);

    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let root = RngStream::new(seed);
        let mixture = MixtureSpec::random_isotropic(k, spec.dim, spec.separation, &root.child(1))?;
        let train_data = gaussian_mixture_generate(&mixture, &counts, &root.child(2))?;
        let teacher = train_teacher(spec, &train_data, &root.child(4))?;
        let dd = distill_from(spec, &teacher, &train_data, &root.child(6))?;
        let sl = relabel(&teacher, &dd, spec.label_epochs, spec.jitter_sigma, &root.child(7))?;

        let raw_mats = raw_label_matrices(&sl)?;
        let cal_result = optimize_tau_multi(sl.slices(), dd.labels(), &prior, grid)?;
        let cal_mats = calibrate_softlabel_set(&sl, &prior, &cal_result)?.to_matrices()?;

        let eval_init = init_mlp(spec.dim, spec.hidden_dim, k, spec.activation, &root.child(8))?;
        let eval_cfg = TrainConfig {
            epochs: spec.eval_epochs,
            batch_size: spec.eval_batch,
            learning_rate: spec.eval_lr,
            momentum: spec.momentum,
            weight_decay: 0.0,
            resample: false,
            rng: root.child(9),
        };
        let test =
            gaussian_mixture_generate(&mixture, &vec![spec.test_per_class; k], &root.child(10))?;

        let (_, mut raw_metrics) = train_eval_model(
            eval_init.clone(),
            &dd,
            &raw_mats,
            spec.label_epochs,
            &eval_cfg,
            &test,
            &counts,
            &thresholds,
        )?;
        let (_, mut cal_metrics) = train_eval_model(
            eval_init,
            &dd,
            &cal_mats,
            spec.label_epochs,
            &eval_cfg,
            &test,
            &counts,
            &thresholds,
        )?;
        for (m, label) in [(&mut raw_metrics, "raw"), (&mut cal_metrics, "calibrated")] {
            m.manifest.insert("adsa.labels".to_string(), label.to_string());
            m.manifest.insert("adsa.seed".to_string(), seed.to_string());
            m.manifest.insert("adsa.base_count".to_string(), base_count.to_string());
            m.manifest
                .insert("adsa.imbalance_factor".to_string(), imbalance_factor.to_string());
            m.manifest.insert("adsa.tau_star".to_string(), cal_result.tau_star.to_string());
            m.manifest
                .insert("adsa.teacher".to_string(), format!("{:016x}", teacher.fingerprint()));
            spec.describe_into("pipeline", &mut m.manifest);
        }

        runs.push(AdsaComparison {
            seed,
            tau_star: cal_result.tau_star,
            raw: raw_metrics,
            calibrated: cal_metrics,
        });
    }
    Ok(runs)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::domain(format!(
            "rank correlation needs equal lengths, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::domain("rank correlation needs at least 3 points".to_string()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::numeric("rank correlation inputs must be finite".to_string()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mean) * (b - mean);
        dx += (a - mean).powi(2);
        dy += (b - mean).powi(2);
    }
    if dx == 0.0 || dy == 0.0 {
        return Err(Error::numeric(
            "rank correlation undefined: one input is constant".to_string(),
        ));
    }
    Ok(num / (dx * dy).sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite inputs"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ProbVector;

    fn linear_model_with(weights: &[f64], biases: &[f64], input_dim: usize, k: usize) -> MlpModel {
        let mut model =
            init_mlp(input_dim, 0, k, Activation::Relu, &RngStream::new(0)).unwrap();
        let mut params = weights.to_vec();
        params.extend_from_slice(biases);
        model.set_params_f64(&params).unwrap();
        model
    }

    /// A one-hot-input identity classifier: class c scores 10 on its own
    /// coordinate.
    fn perfect_setup(k: usize, per_class: usize) -> (MlpModel, LabeledSet) {
        let mut w = vec![0.0f64; k * k];
        for c in 0..k {
            w[c * k + c] = 10.0;
        }
        let model = linear_model_with(&w, &vec![0.0; k], k, k);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for c in 0..k {
            for _ in 0..per_class {
                let mut row = vec![0.0f32; k];
                row[c] = 1.0;
                feats.extend(row);
                labels.push(c);
            }
        }
        let features = Matrix::from_vec(k * per_class, k, feats).unwrap();
        (model, LabeledSet::new(features, labels, k).unwrap())
    }

    #[test]
    fn threshold_bands_follow_the_count_rule() {
        let t = SplitThresholds::REFERENCE;
        assert_eq!(t.band(150), SplitBand::Head);
        assert_eq!(t.band(100), SplitBand::Head);
        assert_eq!(t.band(50), SplitBand::Mid);
        assert_eq!(t.band(20), SplitBand::Mid);
        assert_eq!(t.band(5), SplitBand::Tail);
        assert!(SplitThresholds::new(20, 20).is_err());
    }

    #[test]
    fn thresholds_rescale_with_fixture_size() {
        assert_eq!(SplitThresholds::scaled_to(500), SplitThresholds::REFERENCE);
        let half = SplitThresholds::scaled_to(250);
        assert_eq!((half.head_min, half.mid_min), (50, 10));
        let tiny = SplitThresholds::scaled_to(10);
        assert!(tiny.mid_min >= 1 && tiny.head_min > tiny.mid_min);
    }

    #[test]
    fn perfect_classifier_scores_ones() {
        let (model, test) = perfect_setup(4, 8);
        let report =
            compute_metrics(&model, &test, &[150, 50, 5, 200], &SplitThresholds::REFERENCE)
                .unwrap();
        assert!(report.per_class_accuracy.iter().all(|&a| a == 1.0));
        assert_eq!(report.overall_accuracy, 1.0);
        assert!(report.per_class_confidence.iter().all(|&c| c > 0.99));
        assert_eq!(
            report.splits,
            vec![SplitBand::Head, SplitBand::Mid, SplitBand::Tail, SplitBand::Head]
        );
        assert_eq!(report.head_accuracy, Some(1.0));
        assert_eq!(report.mid_accuracy, Some(1.0));
        assert_eq!(report.tail_accuracy, Some(1.0));
    }

    #[test]
    fn split_example_from_the_threshold_rule() {
        let (model, test) = perfect_setup(3, 2);
        let report =
            compute_metrics(&model, &test, &[150, 50, 5], &SplitThresholds::REFERENCE).unwrap();
        assert_eq!(report.splits, vec![SplitBand::Head, SplitBand::Mid, SplitBand::Tail]);
    }

    #[test]
    fn empty_band_reports_none() {
        let (model, test) = perfect_setup(3, 2);
        let report =
            compute_metrics(&model, &test, &[500, 400, 300], &SplitThresholds::REFERENCE).unwrap();
        assert_eq!(report.head_accuracy, Some(1.0));
        assert_eq!(report.mid_accuracy, None);
        assert_eq!(report.tail_accuracy, None);
        assert!(report.summary_csv_row("r", None).contains("nan"));
    }

    #[test]
    fn metrics_reject_missing_test_class() {
        let (model, _) = perfect_setup(3, 2);
        let features = Matrix::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let test = LabeledSet::new(features, vec![0, 1], 3).unwrap();
        let err = compute_metrics(&model, &test, &[10, 10, 10], &SplitThresholds::REFERENCE)
            .unwrap_err();
        assert!(matches!(err, Error::Domain(_)), "got {err}");
    }

    #[test]
    fn overall_accuracy_is_the_count_weighted_class_mean() {
        // An imperfect random-ish model on an unbalanced test set.
        let mut rng = RngStream::new(3);
        let k = 3;
        let mut w = vec![0.0f64; 4 * k];
        for v in w.iter_mut() {
            *v = rng.normal() * 0.3;
        }
        let model = linear_model_with(&w, &vec![0.1, -0.2, 0.05], 4, k);
        let mut feats = vec![0.0f32; 60 * 4];
        rng.fill_normal(&mut feats, 0.0, 1.0);
        let labels: Vec<usize> = (0..60).map(|i| if i < 30 { 0 } else if i < 50 { 1 } else { 2 }).collect();
        let test = LabeledSet::new(Matrix::from_vec(60, 4, feats).unwrap(), labels, k).unwrap();
        let report =
            compute_metrics(&model, &test, &[100, 100, 100], &SplitThresholds::REFERENCE).unwrap();
        let weighted: f64 = report
            .per_class_accuracy
            .iter()
            .zip(&report.test_counts)
            .map(|(&a, &n)| a * n as f64)
            .sum::<f64>()
            / 60.0;
        assert!(
            (report.overall_accuracy - weighted).abs() < 1e-12,
            "overall {} vs weighted mean {}",
            report.overall_accuracy,
            weighted
        );
    }

    #[test]
    fn near_random_model_sits_at_chance_per_class() {
        // Features carry no class information (same standard normal for
        // every label), so per-class accuracy must sit near 1/K. The
        // binomial bound at N=500 per class is 4·sqrt(p(1-p)/N) ≈ 0.077.
        let k = 4;
        let d = 32;
        let n_per = 500;
        let model = init_mlp(d, 0, k, Activation::Relu, &RngStream::new(77)).unwrap();
        let mut rng = RngStream::new(78);
        let mut feats = vec![0.0f32; k * n_per * d];
        rng.fill_normal(&mut feats, 0.0, 1.0);
        let labels: Vec<usize> = (0..k * n_per).map(|i| i % k).collect();
        let test = LabeledSet::new(Matrix::from_vec(k * n_per, d, feats).unwrap(), labels, k)
            .unwrap();
        let report =
            compute_metrics(&model, &test, &[500; 4], &SplitThresholds::REFERENCE).unwrap();
        let bound = 4.0 * (0.25 * 0.75 / n_per as f64).sqrt();
        for (c, &acc) in report.per_class_accuracy.iter().enumerate() {
            assert!(
                (acc - 0.25).abs() <= bound,
                "class {c} accuracy {acc} strayed from chance by more than {bound}"
            );
        }
    }

    #[test]
    fn bias_decomposition_zeroes_on_identical_tables() {
        let table: ProbRows = vec![
            ProbVector::new(vec![0.7, 0.2, 0.1]).unwrap(),
            ProbVector::new(vec![0.1, 0.6, 0.3]).unwrap(),
        ];
        let d = bias_decomposition(&table, &table, &table, &table).unwrap();
        assert_eq!(d.epsilon_t_norm(), 0.0);
        assert_eq!(d.epsilon_i_norm(), 0.0);
        assert_eq!(d.residual_norm(), 0.0);
    }

    #[test]
    fn bias_decomposition_closes_additive_fixture() {
        // Build C3 by hand as C4 + ε_T + ε_I: the residual must vanish and
        // the reconstruction must return C3.
        let c4: ProbRows = vec![
            ProbVector::new(vec![0.5, 0.3, 0.2]).unwrap(),
            ProbVector::new(vec![0.25, 0.5, 0.25]).unwrap(),
        ];
        let c1: ProbRows = vec![
            ProbVector::new(vec![0.55, 0.27, 0.18]).unwrap(),
            ProbVector::new(vec![0.3, 0.45, 0.25]).unwrap(),
        ];
        let c2: ProbRows = vec![
            ProbVector::new(vec![0.6, 0.25, 0.15]).unwrap(),
            ProbVector::new(vec![0.2, 0.55, 0.25]).unwrap(),
        ];
        let mut c3 = Vec::new();
        for i in 0..2 {
            let row: Vec<f64> = (0..3)
                .map(|j| c4[i][j] + (c2[i][j] - c4[i][j]) + (c1[i][j] - c4[i][j]))
                .collect();
            c3.push(ProbVector::new(row).unwrap());
        }
        let d = bias_decomposition(&c1, &c2, &c3, &c4).unwrap();
        assert!(d.residual_norm() < 1e-12, "residual {}", d.residual_norm());
        assert!(d.max_row_sum_magnitude() < 1e-6);
        for i in 0..2 {
            for j in 0..3 {
                let recon = c4[i][j] + d.epsilon_t[i][j] + d.epsilon_i[i][j] + d.residual[i][j];
                assert!((recon - c3[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bias_decomposition_rejects_shape_mismatch() {
        let a: ProbRows = vec![ProbVector::new(vec![0.5, 0.5]).unwrap()];
        let b: ProbRows = vec![ProbVector::new(vec![0.5, 0.3, 0.2]).unwrap()];
        assert!(bias_decomposition(&a, &a, &a, &b).is_err());
        assert!(bias_decomposition(&b, &a, &a, &a).is_err());
    }

    #[test]
    fn spearman_matches_hand_rankings() {
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[5.0, 1.0, -2.0]).unwrap(), -1.0);
        let rho = spearman_rho(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(rho > 0.9, "tie handling broke monotone data: {rho}");
        assert!(spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    fn tiny_spec() -> PipelineSpec {
        PipelineSpec {
            num_classes: 3,
            dim: 2,
            separation: 2.0,
            hidden_dim: 0,
            activation: Activation::Relu,
            ipc: 3,
            test_per_class: 20,
            teacher_epochs: 8,
            teacher_batch: 8,
            teacher_lr: 0.2,
            teacher_weight_decay: 0.0,
            momentum: 0.0,
            distill_steps: 10,
            distill_lr: 0.5,
            distill_reg_weight: 0.1,
            label_epochs: 2,
            jitter_sigma: 0.0,
            eval_epochs: 6,
            eval_batch: 3,
            eval_lr: 0.2,
        }
    }

    #[test]
    fn perturbation_run_is_bit_deterministic() {
        let spec = tiny_spec();
        let a = run_perturbation(PerturbationConfigId::C3, 4, &spec, 60, 1, &[5]).unwrap();
        let b = run_perturbation(PerturbationConfigId::C3, 4, &spec, 60, 1, &[5]).unwrap();
        assert_eq!(a.len(), 1);
        let (x, y) = (&a[0], &b[0]);
        assert_eq!(x.metrics.manifest, y.metrics.manifest);
        for (u, v) in x
            .metrics
            .per_class_accuracy
            .iter()
            .chain(&x.metrics.per_class_confidence)
            .chain(&x.metrics.per_class_entropy)
            .zip(
                y.metrics
                    .per_class_accuracy
                    .iter()
                    .chain(&y.metrics.per_class_confidence)
                    .chain(&y.metrics.per_class_entropy),
            )
        {
            assert_eq!(u.to_bits(), v.to_bits(), "harness runs must be bit-identical");
        }
        assert_eq!(x.varied_label_entropy.to_bits(), y.varied_label_entropy.to_bits());
    }

    #[test]
    fn schedule_k_is_irrelevant_when_slices_are_identical() {
        // With zero jitter every relabel slice is the same matrix, so
        // cycling 1 slice or all of them must give identical trajectories.
        let spec = tiny_spec();
        let root = RngStream::new(42);
        let mixture =
            MixtureSpec::random_isotropic(spec.num_classes, spec.dim, spec.separation, &root.child(1))
                .unwrap();
        let counts = vec![20; 3];
        let data = gaussian_mixture_generate(&mixture, &counts, &root.child(2)).unwrap();
        let teacher = train_teacher(&spec, &data, &root.child(4)).unwrap();
        let dd = distill_from(&spec, &teacher, &data, &root.child(6)).unwrap();
        let sl = relabel(&teacher, &dd, 3, 0.0, &root.child(7)).unwrap();
        let mats = raw_label_matrices(&sl).unwrap();
        let test = gaussian_mixture_generate(&mixture, &vec![10; 3], &root.child(10)).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 3,
            learning_rate: 0.2,
            momentum: 0.0,
            weight_decay: 0.0,
            resample: false,
            rng: root.child(9),
        };
        let init = init_mlp(spec.dim, 0, 3, Activation::Relu, &root.child(8)).unwrap();
        let thresholds = SplitThresholds::scaled_to(20);
        let (m1, _) = train_eval_model(
            init.clone(),
            &dd,
            &mats,
            1,
            &cfg,
            &test,
            &counts,
            &thresholds,
        )
        .unwrap();
        let (m3, _) =
            train_eval_model(init, &dd, &mats, 3, &cfg, &test, &counts, &thresholds).unwrap();
        for (a, b) in m1.params_f64().iter().zip(m3.params_f64()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn one_hot_soft_labels_match_the_hard_label_baseline() {
        // Soft CE against exact one-hot rows has the same gradient as hard
        // CE, so with a shared init and batch order the soft-label model
        // cannot underperform the hard-label probe.
        let spec = tiny_spec();
        let root = RngStream::new(11);
        let mixture =
            MixtureSpec::random_isotropic(spec.num_classes, spec.dim, spec.separation, &root.child(1))
                .unwrap();
        let counts = vec![15; 3];
        let data = gaussian_mixture_generate(&mixture, &counts, &root.child(2)).unwrap();
        let teacher = train_teacher(&spec, &data, &root.child(4)).unwrap();
        let dd = distill_from(&spec, &teacher, &data, &root.child(6)).unwrap();
        let test = gaussian_mixture_generate(&mixture, &vec![30; 3], &root.child(10)).unwrap();
        let thresholds = SplitThresholds::scaled_to(15);

        let mut onehot = Matrix::zeros(dd.len(), 3).unwrap();
        for (i, &y) in dd.labels().iter().enumerate() {
            onehot.set(i, y, 1.0);
        }
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 3,
            learning_rate: 0.2,
            momentum: 0.0,
            weight_decay: 0.0,
            resample: false,
            rng: root.child(9),
        };
        let init = init_mlp(spec.dim, 0, 3, Activation::Relu, &root.child(8)).unwrap();
        let (_, soft_report) = train_eval_model(
            init.clone(),
            &dd,
            std::slice::from_ref(&onehot),
            1,
            &cfg,
            &test,
            &counts,
            &thresholds,
        )
        .unwrap();

        let hard_set = dd.to_labeled_set().unwrap();
        let probe = train(init, &TrainData::Hard(&hard_set), &cfg).unwrap().model;
        let probe_report = compute_metrics(&probe, &test, &counts, &thresholds).unwrap();
        assert!(
            soft_report.overall_accuracy >= probe_report.overall_accuracy,
            "one-hot soft labels scored {} vs hard-label probe {}",
            soft_report.overall_accuracy,
            probe_report.overall_accuracy
        );
    }

    #[test]
    fn csv_rows_follow_the_schema() {
        let (model, test) = perfect_setup(3, 2);
        let report =
            compute_metrics(&model, &test, &[150, 50, 5], &SplitThresholds::REFERENCE).unwrap();
        let rows = report.metrics_csv_rows("run1", "C4", 7);
        assert_eq!(rows.len(), 3);
        assert!(rows[0].starts_with("run1,C4,7,0,150,head,1,"));
        assert!(rows[2].contains(",tail,"));
        let summary = report.summary_csv_row("run1", Some(0.5));
        assert!(summary.starts_with("run1,1,"));
        assert!(summary.ends_with(",0.5"));
        assert_eq!(METRICS_CSV_HEADER.split(',').count(), rows[0].split(',').count());
        assert_eq!(SUMMARY_CSV_HEADER.split(',').count(), summary.split(',').count());
    }

    #[test]
    fn manifest_serialization_is_sorted_and_stable() {
        let mut m = BTreeMap::new();
        m.insert("zeta".to_string(), "1".to_string());
        m.insert("alpha".to_string(), "2".to_string());
        assert_eq!(manifest_to_string(&m), "alpha = 2\nzeta = 1\n");
    }
}
