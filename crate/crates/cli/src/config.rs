//! Experiment configuration: one TOML file drives every stage.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use ltlab_core::adsa::TauGrid;
use ltlab_core::harness::{PerturbationConfigId, PipelineSpec};
use ltlab_core::model::Activation;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run identifier; prefixes every run_id in the CSVs.
    pub name: String,
    /// Output directory for all artifacts (overridable with `--out`).
    pub out_dir: PathBuf,
    /// One full pipeline per seed.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub relabel: RelabelConfig,
    #[serde(default)]
    pub calibrate: CalibrateConfig,
    pub eval: EvalConfig,
    pub perturb: Option<PerturbConfig>,
    pub bound: Option<BoundConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub dim: usize,
    /// Spread of the random class means relative to unit cluster noise.
    pub separation: f64,
    /// Largest class count of the exponential long-tail profile.
    pub base_count: usize,
    /// Ratio between the largest and smallest class counts.
    pub imbalance_factor: f64,
    /// Balanced held-out test set size per class.
    pub test_per_class: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    #[serde(default)]
    pub hidden_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Distilled items per class.
    pub ipc: usize,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub reg_weight: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelabelConfig {
    /// Number of stored soft-label slices (one teacher pass each).
    pub label_epochs: usize,
    #[serde(default)]
    pub jitter_sigma: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    #[serde(default = "default_tau_lo")]
    pub tau_lo: f64,
    #[serde(default = "default_tau_hi")]
    pub tau_hi: f64,
    #[serde(default = "default_tau_step")]
    pub tau_step: f64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        CalibrateConfig { tau_lo: 0.0, tau_hi: 3.0, tau_step: 0.01 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Which soft labels the evaluation model trains on:
    /// "calibrated" (default) or "raw".
    #[serde(default = "default_labels")]
    pub labels: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    /// Sample counts tried for the varied classes.
    pub a_values: Vec<usize>,
    #[serde(default = "default_num_varied")]
    pub num_varied: usize,
    /// Total training samples; the balanced profile splits this evenly.
    pub total_budget: usize,
    /// Which of C1..C4 to run; all four enable the bias decomposition.
    #[serde(default = "default_perturb_configs")]
    pub configs: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    /// Discrete input-space size of the synthetic joints.
    pub nx: usize,
    pub num_classes: usize,
    /// How many random candidate joints to test for form agreement.
    pub num_draws: usize,
    pub seed: u64,
    #[serde(default = "default_bound_constant")]
    pub loss_bound_constant: f64,
    #[serde(default = "default_empirical_loss")]
    pub empirical_loss: f64,
}

fn default_activation() -> String {
    "relu".to_string()
}
fn default_momentum() -> f64 {
    0.9
}
fn default_tau_lo() -> f64 {
    0.0
}
fn default_tau_hi() -> f64 {
    3.0
}
fn default_tau_step() -> f64 {
    0.01
}
fn default_labels() -> String {
    "calibrated".to_string()
}
fn default_num_varied() -> usize {
    1
}
fn default_perturb_configs() -> Vec<String> {
    vec!["C1".into(), "C2".into(), "C3".into(), "C4".into()]
}
fn default_bound_constant() -> f64 {
    1.0
}
fn default_empirical_loss() -> f64 {
    0.25
}

fn bad(field: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("field `{field}`: {why}"))
}

fn require_positive_f64(field: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(bad(field, format!("must be positive and finite, got {v}")));
    }
    Ok(())
}

fn require_nonneg_f64(field: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(bad(field, format!("must be non-negative and finite, got {v}")));
    }
    Ok(())
}

fn require_positive_usize(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(bad(field, "must be positive"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::Config(format!("config file {} does not exist", path.display()))
            } else {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            }
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(',') || self.name.contains(char::is_whitespace) {
            return Err(bad("name", "must be a non-empty token without commas or spaces"));
        }
        if self.seeds.is_empty() {
            return Err(bad("seeds", "must list at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(bad("seeds", "must not repeat"));
        }

        if self.data.num_classes < 2 {
            return Err(bad("data.num_classes", "needs at least 2 classes"));
        }
        require_positive_usize("data.dim", self.data.dim)?;
        require_positive_f64("data.separation", self.data.separation)?;
        require_positive_usize("data.base_count", self.data.base_count)?;
        if !(self.data.imbalance_factor >= 1.0 && self.data.imbalance_factor.is_finite()) {
            return Err(bad(
                "data.imbalance_factor",
                format!("must be >= 1, got {}", self.data.imbalance_factor),
            ));
        }
        require_positive_usize("data.test_per_class", self.data.test_per_class)?;

        self.parse_activation()?;
        require_positive_usize("teacher.epochs", self.teacher.epochs)?;
        require_positive_usize("teacher.batch_size", self.teacher.batch_size)?;
        require_nonneg_f64("teacher.learning_rate", self.teacher.learning_rate)?;
        if !(self.teacher.momentum >= 0.0 && self.teacher.momentum < 1.0) {
            return Err(bad(
                "teacher.momentum",
                format!("must lie in [0, 1), got {}", self.teacher.momentum),
            ));
        }
        require_nonneg_f64("teacher.weight_decay", self.teacher.weight_decay)?;

        require_positive_usize("distill.ipc", self.distill.ipc)?;
        require_positive_f64("distill.learning_rate", self.distill.learning_rate)?;
        require_nonneg_f64("distill.reg_weight", self.distill.reg_weight)?;

        require_positive_usize("relabel.label_epochs", self.relabel.label_epochs)?;
        require_nonneg_f64("relabel.jitter_sigma", self.relabel.jitter_sigma)?;

        self.tau_grid()?;

        require_positive_usize("eval.epochs", self.eval.epochs)?;
        require_positive_usize("eval.batch_size", self.eval.batch_size)?;
        require_nonneg_f64("eval.learning_rate", self.eval.learning_rate)?;
        if !(self.eval.momentum >= 0.0 && self.eval.momentum < 1.0) {
            return Err(bad(
                "eval.momentum",
                format!("must lie in [0, 1), got {}", self.eval.momentum),
            ));
        }
        if self.eval.labels != "calibrated" && self.eval.labels != "raw" {
            return Err(bad(
                "eval.labels",
                format!("must be \"calibrated\" or \"raw\", got {:?}", self.eval.labels),
            ));
        }

        if let Some(p) = &self.perturb {
            if p.a_values.is_empty() {
                return Err(bad("perturb.a_values", "must list at least one count"));
            }
            require_positive_usize("perturb.num_varied", p.num_varied)?;
            if p.num_varied >= self.data.num_classes {
                return Err(bad(
                    "perturb.num_varied",
                    format!("must leave at least one unvaried class of {}", self.data.num_classes),
                ));
            }
            require_positive_usize("perturb.total_budget", p.total_budget)?;
            if p.total_budget % self.data.num_classes != 0 {
                return Err(bad(
                    "perturb.total_budget",
                    format!("must divide evenly into {} classes", self.data.num_classes),
                ));
            }
            if p.configs.is_empty() {
                return Err(bad("perturb.configs", "must list at least one of C1..C4"));
            }
            for c in &p.configs {
                PerturbationConfigId::parse(c)
                    .map_err(|e| bad("perturb.configs", e))?;
            }
        }

        if let Some(b) = &self.bound {
            if b.nx < 2 {
                return Err(bad("bound.nx", "needs at least 2 input states"));
            }
            if b.num_classes < 2 {
                return Err(bad("bound.num_classes", "needs at least 2 classes"));
            }
            require_positive_usize("bound.num_draws", b.num_draws)?;
            require_positive_f64("bound.loss_bound_constant", b.loss_bound_constant)?;
            require_nonneg_f64("bound.empirical_loss", b.empirical_loss)?;
        }
        Ok(())
    }

    pub fn parse_activation(&self) -> Result<Activation> {
        match self.teacher.activation.as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(bad(
                "teacher.activation",
                format!("must be \"relu\" or \"tanh\", got {other:?}"),
            )),
        }
    }

    pub fn tau_grid(&self) -> Result<TauGrid> {
        TauGrid::new(self.calibrate.tau_lo, self.calibrate.tau_hi, self.calibrate.tau_step)
            .map_err(|e| bad("calibrate.tau_lo/tau_hi/tau_step", e))
    }

    /// The shared pipeline knobs in the shape the experiment harness takes.
    pub fn pipeline_spec(&self) -> Result<PipelineSpec> {
        Ok(PipelineSpec {
            num_classes: self.data.num_classes,
            dim: self.data.dim,
            separation: self.data.separation,
            hidden_dim: self.teacher.hidden_dim,
            activation: self.parse_activation()?,
            ipc: self.distill.ipc,
            test_per_class: self.data.test_per_class,
            teacher_epochs: self.teacher.epochs,
            teacher_batch: self.teacher.batch_size,
            teacher_lr: self.teacher.learning_rate,
            teacher_weight_decay: self.teacher.weight_decay,
            momentum: self.teacher.momentum,
            distill_steps: self.distill.steps,
            distill_lr: self.distill.learning_rate,
            distill_reg_weight: self.distill.reg_weight,
            label_epochs: self.relabel.label_epochs,
            jitter_sigma: self.relabel.jitter_sigma,
            eval_epochs: self.eval.epochs,
            eval_batch: self.eval.batch_size,
            eval_lr: self.eval.learning_rate,
        })
    }

    pub fn perturb_config_ids(&self) -> Result<Vec<PerturbationConfigId>> {
        let p = self.perturb.as_ref().ok_or_else(|| {
            CliError::Config("field `perturb`: section is required for this stage".to_string())
        })?;
        p.configs
            .iter()
            .map(|c| PerturbationConfigId::parse(c).map_err(|e| bad("perturb.configs", e)))
            .collect()
    }
}
