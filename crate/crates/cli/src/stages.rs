//! The nine pipeline stages.
//!
//! Stages communicate exclusively through artifact files in the output
//! directory plus the keyed run manifest, so any stage can be re-run or
//! replaced in isolation. Per-seed randomness follows a fixed child-stream
//! layout off `RngStream::new(seed)`: 1 mixture, 2 training data,
//! 4 teacher, 6 distillation, 7 relabeling, 8 evaluation init,
//! 9 evaluation batches, 10 test data — the same layout the experiment
//! harness uses, so CLI artifacts and harness runs agree bit-for-bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ltlab_core::adsa::{calibrate_logits, optimize_tau_multi, CalibratedLabelSet};
use ltlab_core::bound::{form_equivalence_check, BoundReport, DiscreteJoint};
use ltlab_core::distill::{class_feature_stats, distill_images, DistilledSet, InitScheme};
use ltlab_core::harness::{
    bias_decomposition, class_input_means, raw_label_matrices, run_perturbation,
    train_eval_model, PerturbationConfigId, SplitThresholds, METRICS_CSV_HEADER,
    SUMMARY_CSV_HEADER,
};
use ltlab_core::io as artifacts;
use ltlab_core::longtail::{
    class_prior, gaussian_mixture_generate, LabeledSet, LongTailSpec, MixtureSpec,
};
use ltlab_core::model::{init_mlp, train, MlpModel, TrainConfig, TrainData};
use ltlab_core::numcore::{Matrix, ProbVector, RngStream};
use ltlab_core::softlabel::{relabel, ProbRows, SoftLabelSet};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::manifest::{require_artifact, Manifest, OutputLock};
use crate::plot;

const FORM_AGREEMENT_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------
// Artifact naming

fn train_features(seed: u64) -> String {
    format!("train_s{seed}.feat.ltdt")
}
fn train_labels(seed: u64) -> String {
    format!("train_s{seed}.lab.ltlb")
}
fn test_features(seed: u64) -> String {
    format!("test_s{seed}.feat.ltdt")
}
fn test_labels(seed: u64) -> String {
    format!("test_s{seed}.lab.ltlb")
}
fn teacher_file(seed: u64) -> String {
    format!("teacher_s{seed}.ltmd")
}
fn distilled_features(seed: u64) -> String {
    format!("distilled_s{seed}.feat.ltdt")
}
fn distilled_labels(seed: u64) -> String {
    format!("distilled_s{seed}.lab.ltlb")
}
fn softlabel_file(seed: u64) -> String {
    format!("soft_s{seed}.ltsl")
}
fn calibration_file(seed: u64) -> String {
    format!("calibration_s{seed}.csv")
}

// ---------------------------------------------------------------------
// Shared helpers

fn run_id(cfg: &ExperimentConfig, seed: u64) -> String {
    format!("{}-s{seed}", cfg.name)
}

fn stamp_run(cfg: &ExperimentConfig, manifest: &mut Manifest) {
    manifest.set("run.name", cfg.name.clone());
    let seeds: Vec<String> = cfg.seeds.iter().map(|s| s.to_string()).collect();
    manifest.set("run.seeds", seeds.join(","));
}

fn longtail_counts(cfg: &ExperimentConfig) -> Result<Vec<usize>> {
    Ok(LongTailSpec::exponential(
        cfg.data.num_classes,
        cfg.data.base_count,
        cfg.data.imbalance_factor,
    )?
    .counts()?)
}

fn load_train_set(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<LabeledSet> {
    let f = out.join(train_features(seed));
    let l = out.join(train_labels(seed));
    require_artifact(&f, "make-data")?;
    require_artifact(&l, "make-data")?;
    Ok(artifacts::load_labeled_set(&f, &l, cfg.data.num_classes)?)
}

fn load_test_set(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<LabeledSet> {
    let f = out.join(test_features(seed));
    let l = out.join(test_labels(seed));
    require_artifact(&f, "make-data")?;
    require_artifact(&l, "make-data")?;
    Ok(artifacts::load_labeled_set(&f, &l, cfg.data.num_classes)?)
}

fn load_teacher(out: &Path, seed: u64) -> Result<MlpModel> {
    let p = out.join(teacher_file(seed));
    require_artifact(&p, "train-teacher")?;
    Ok(artifacts::load_model(&p)?)
}

fn load_distilled(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<DistilledSet> {
    let f = out.join(distilled_features(seed));
    let l = out.join(distilled_labels(seed));
    require_artifact(&f, "distill")?;
    require_artifact(&l, "distill")?;
    Ok(artifacts::load_distilled_set(&f, &l, cfg.data.num_classes)?)
}

fn load_softlabels(out: &Path, seed: u64) -> Result<SoftLabelSet> {
    let p = out.join(softlabel_file(seed));
    require_artifact(&p, "relabel")?;
    Ok(artifacts::load_softlabel_set(&p)?)
}

fn counts_to_string(counts: &[usize]) -> String {
    counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------
// Stages

/// Samples the long-tailed training set and the balanced test set for
/// every seed.
pub fn make_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let _lock = OutputLock::acquire(out)?;
    let mut manifest = Manifest::load_or_empty(out)?;
    let counts = longtail_counts(cfg)?;

    for &seed in &cfg.seeds {
        let root = RngStream::new(seed);
        let mixture = MixtureSpec::random_isotropic(
            cfg.data.num_classes,
            cfg.data.dim,
            cfg.data.separation,
            &root.child(1),
        )?;
        let train_set = gaussian_mixture_generate(&mixture, &counts, &root.child(2))?;
        let test_set = gaussian_mixture_generate(
            &mixture,
            &vec![cfg.data.test_per_class; cfg.data.num_classes],
            &root.child(10),
        )?;
        artifacts::save_labeled_set(
            &train_set,
            &out.join(train_features(seed)),
            &out.join(train_labels(seed)),
        )?;
        artifacts::save_labeled_set(
            &test_set,
            &out.join(test_features(seed)),
            &out.join(test_labels(seed)),
        )?;
    }

    stamp_run(cfg, &mut manifest);
    manifest.clear_section("data.");
    manifest.set("data.num_classes", cfg.data.num_classes.to_string());
    manifest.set("data.dim", cfg.data.dim.to_string());
    manifest.set("data.separation", cfg.data.separation.to_string());
    manifest.set("data.base_count", cfg.data.base_count.to_string());
    manifest.set("data.imbalance_factor", cfg.data.imbalance_factor.to_string());
    manifest.set("data.test_per_class", cfg.data.test_per_class.to_string());
    manifest.set("data.train_counts", counts_to_string(&counts));
    for &seed in &cfg.seeds {
        manifest.set(
            format!("data.s{seed}.files"),
            format!(
                "{} {} {} {}",
                train_features(seed),
                train_labels(seed),
                test_features(seed),
                test_labels(seed)
            ),
        );
    }
    manifest.write()?;
    println!(
        "make-data: {} samples/seed across {} classes, {} seeds",
        counts.iter().sum::<usize>(),
        cfg.data.num_classes,
        cfg.seeds.len()
    );
    Ok(())
}

/// Trains the teacher on the long-tailed training set, one per seed.
pub fn train_teacher(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let _lock = OutputLock::acquire(out)?;
    let mut manifest = Manifest::load_or_empty(out)?;
    let activation = cfg.parse_activation()?;

    stamp_run(cfg, &mut manifest);
    manifest.clear_section("teacher.");
    for &seed in &cfg.seeds {
        let data = load_train_set(cfg, out, seed)?;
        let root = RngStream::new(seed);
        let teacher_rng = root.child(4);
        let model = init_mlp(
            cfg.data.dim,
            cfg.teacher.hidden_dim,
            cfg.data.num_classes,
            activation,
            &teacher_rng.child(0),
        )?;
        let train_cfg = TrainConfig {
            epochs: cfg.teacher.epochs,
            batch_size: cfg.teacher.batch_size,
            learning_rate: cfg.teacher.learning_rate,
            momentum: cfg.teacher.momentum,
            weight_decay: cfg.teacher.weight_decay,
            resample: false,
            rng: teacher_rng.child(1),
        };
        let run = train(model, &TrainData::Hard(&data), &train_cfg)?;
        artifacts::save_model(&out.join(teacher_file(seed)), &run.model)?;
        manifest.set(
            format!("teacher.s{seed}.fingerprint"),
            format!("{:016x}", run.model.fingerprint()),
        );
        manifest.set(format!("teacher.s{seed}.file"), teacher_file(seed));
    }
    manifest.set("teacher.hidden_dim", cfg.teacher.hidden_dim.to_string());
    manifest.set("teacher.activation", cfg.teacher.activation.clone());
    manifest.set("teacher.epochs", cfg.teacher.epochs.to_string());
    manifest.set("teacher.batch_size", cfg.teacher.batch_size.to_string());
    manifest.set("teacher.learning_rate", cfg.teacher.learning_rate.to_string());
    manifest.set("teacher.momentum", cfg.teacher.momentum.to_string());
    manifest.set("teacher.weight_decay", cfg.teacher.weight_decay.to_string());
    manifest.write()?;
    println!("train-teacher: {} teachers trained", cfg.seeds.len());
    Ok(())
}

/// Synthesizes the balanced distilled set from each seed's teacher.
pub fn distill(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let _lock = OutputLock::acquire(out)?;
    let mut manifest = Manifest::load_or_empty(out)?;

    stamp_run(cfg, &mut manifest);
    manifest.clear_section("distill.");
    for &seed in &cfg.seeds {
        let teacher = load_teacher(out, seed)?;
        let data = load_train_set(cfg, out, seed)?;
        let stats = class_feature_stats(&teacher, &data)?;
        let root = RngStream::new(seed);
        let dcfg = ltlab_core::distill::DistillConfig {
            steps: cfg.distill.steps,
            learning_rate: cfg.distill.learning_rate,
            reg_weight: cfg.distill.reg_weight,
            init: InitScheme::ClassMeanPlusNoise,
            rng: root.child(6),
        };
        let input_means = if cfg.teacher.hidden_dim > 0 {
            Some(class_input_means(&data)?)
        } else {
            None
        };
        let run = distill_images(&teacher, &stats, cfg.distill.ipc, &dcfg, input_means.as_ref())?;
        artifacts::save_distilled_set(
            &run.set,
            &out.join(distilled_features(seed)),
            &out.join(distilled_labels(seed)),
        )?;
        manifest.set(
            format!("distill.s{seed}.files"),
            format!("{} {}", distilled_features(seed), distilled_labels(seed)),
        );
        manifest.set(
            format!("distill.s{seed}.final_objective"),
            run.objective_trace.last().map(|o| o.to_string()).unwrap_or_else(|| "nan".into()),
        );
    }
    manifest.set("distill.ipc", cfg.distill.ipc.to_string());
    manifest.set("distill.steps", cfg.distill.steps.to_string());
    manifest.set("distill.learning_rate", cfg.distill.learning_rate.to_string());
    manifest.set("distill.reg_weight", cfg.distill.reg_weight.to_string());
    manifest.write()?;
    println!(
        "distill: {} items/seed ({} per class)",
        cfg.distill.ipc * cfg.data.num_classes,
        cfg.distill.ipc
    );
    Ok(())
}

/// Generates per-epoch soft labels for each seed's distilled set.
pub fn relabel_stage(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let _lock = OutputLock::acquire(out)?;
    let mut manifest = Manifest::load_or_empty(out)?;

    stamp_run(cfg, &mut manifest);
    manifest.clear_section("relabel.");
    for &seed in &cfg.seeds {
        let teacher = load_teacher(out, seed)?;
        let dd = load_distilled(cfg, out, seed)?;
        let root = RngStream::new(seed);
        let sl = relabel(
            &teacher,
            &dd,
            cfg.relabel.label_epochs,
            cfg.relabel.jitter_sigma,
            &root.child(7),
        )?;
        artifacts::save_softlabel_set(&out.join(softlabel_file(seed)), &sl)?;
        manifest.set(format!("relabel.s{seed}.file"), softlabel_file(seed));
    }
    manifest.set("relabel.label_epochs", cfg.relabel.label_epochs.to_string());
    manifest.set("relabel.jitter_sigma", cfg.relabel.jitter_sigma.to_string());
    manifest.write()?;
    println!(
        "relabel: {} label slices/seed at jitter {}",
        cfg.relabel.label_epochs, cfg.relabel.jitter_sigma
    );
    Ok(())
}

/// Searches the prior-compensation strength τ* per seed and records the
/// full objective trace.
pub fn calibrate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let _lock = OutputLock::acquire(out)?;
    let mut manifest = Manifest::load_or_empty(out)?;
    let grid = cfg.tau_grid()?;

    stamp_run(cfg, &mut manifest);
    manifest.clear_section("calibrate.");
    for &seed in &cfg.seeds {
        let sl = load_softlabels(out, seed)?;
        let dd = load_distilled(cfg, out, seed)?;
        let train_set = load_train_set(cfg, out, seed)?;
        let prior = class_prior(train_set.class_counts())?;
        let result = optimize_tau_multi(sl.slices(), dd.labels(), &prior, &grid)?;

        let mut csv = String::from("tau,objective\n");
        for (tau, obj) in &result.objective_trace {
            csv.push_str(&format!("{tau},{obj}\n"));
        }
        write_text(&out.join(calibration_file(seed)), &csv)?;

        manifest.set(format!("calibrate.s{seed}.tau_star"), result.tau_star.to_string());
        manifest.set(
            format!("calibrate.s{seed}.objective"),
            result.objective_value.to_string(),
        );
        manifest.set(format!("calibrate.s{seed}.inert"), result.calibration_inert.to_string());
        manifest.set(format!("calibrate.s{seed}.file"), calibration_file(seed));
        println!(
            "calibrate: seed {seed} tau*={} objective={:.3e}",
            result.tau_star, result.objective_value
        );
    }
    manifest.set("calibrate.tau_lo", cfg.calibrate.tau_lo.to_string());
    manifest.set("calibrate.tau_hi", cfg.calibrate.tau_hi.to_string());
    manifest.set("calibrate.tau_step", cfg.calibrate.tau_step.to_string());
    manifest.write()?;
    Ok(())
}

fn calibrated_matrices(sl: &SoftLabelSet, prior: &ltlab_core::longtail::ClassPrior, tau: f64) -> Result<Vec<Matrix>> {
    let slices: Vec<ProbRows> = (0..sl.num_label_epochs())
        .map(|e| calibrate_logits(sl.slice(e), prior, tau))
        .collect::<ltlab_core::Result<_>>()?;
    Ok(CalibratedLabelSet { slices, tau }.to_matrices()?)
}

/// Trains the evaluation model per seed on the distilled set (raw or
/// calibrated labels) and writes the metrics and summary CSVs.
pub fn eval(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let _lock = OutputLock::acquire(out)?;
    let mut manifest = Manifest::load_or_empty(out)?;
    let activation = cfg.parse_activation()?;

    let mut metrics_csv = String::from(METRICS_CSV_HEADER);
    metrics_csv.push('\n');
    let mut summary_csv = String::from(SUMMARY_CSV_HEADER);
    summary_csv.push('\n');

    stamp_run(cfg, &mut manifest);
    manifest.clear_section("eval.");
    for &seed in &cfg.seeds {
        let dd = load_distilled(cfg, out, seed)?;
        let sl = load_softlabels(out, seed)?;
        let test_set = load_test_set(cfg, out, seed)?;
        let train_set = load_train_set(cfg, out, seed)?;
        let train_counts = train_set.class_counts().to_vec();

        let (label_mats, tau_report) = if cfg.eval.labels == "calibrated" {
            let key = format!("calibrate.s{seed}.tau_star");
            let tau: f64 = manifest
                .get(&key)
                .ok_or_else(|| {
                    CliError::Missing(format!(
                        "calibration result `{key}` in {} (run `calibrate` first)",
                        out.join(crate::manifest::MANIFEST_FILE).display()
                    ))
                })?
                .parse()
                .map_err(|e| CliError::Numeric(format!("manifest `{key}`: {e}")))?;
            let prior = class_prior(&train_counts)?;
            (calibrated_matrices(&sl, &prior, tau)?, Some(tau))
        } else {
            (raw_label_matrices(&sl)?, None)
        };

        let root = RngStream::new(seed);
        let init = init_mlp(
            cfg.data.dim,
            cfg.teacher.hidden_dim,
            cfg.data.num_classes,
            activation,
            &root.child(8),
        )?;
        let eval_cfg = TrainConfig {
            epochs: cfg.eval.epochs,
            batch_size: cfg.eval.batch_size,
            learning_rate: cfg.eval.learning_rate,
            momentum: cfg.eval.momentum,
            weight_decay: 0.0,
            resample: false,
            rng: root.child(9),
        };
        let max_count = *train_counts.iter().max().expect("at least one class");
        let thresholds = SplitThresholds::scaled_to(max_count);
        let schedule_k = label_mats.len();
        let (_, report) = train_eval_model(
            init,
            &dd,
            &label_mats,
            schedule_k,
            &eval_cfg,
            &test_set,
            &train_counts,
            &thresholds,
        )?;

        let id = run_id(cfg, seed);
        for row in report.metrics_csv_rows(&id, &cfg.eval.labels, seed) {
            metrics_csv.push_str(&row);
            metrics_csv.push('\n');
        }
        summary_csv.push_str(&report.summary_csv_row(&id, tau_report));
        summary_csv.push('\n');
        manifest.set(
            format!("eval.s{seed}.overall_accuracy"),
            report.overall_accuracy.to_string(),
        );
        println!("eval: seed {seed} overall accuracy {:.4}", report.overall_accuracy);
    }
    manifest.set("eval.labels", cfg.eval.labels.clone());
    manifest.set("eval.epochs", cfg.eval.epochs.to_string());
    manifest.set("eval.batch_size", cfg.eval.batch_size.to_string());
    manifest.set("eval.learning_rate", cfg.eval.learning_rate.to_string());
    manifest.set("eval.momentum", cfg.eval.momentum.to_string());
    manifest.set("eval.files", "metrics.csv summary.csv");

    write_text(&out.join("metrics.csv"), &metrics_csv)?;
    write_text(&out.join("summary.csv"), &summary_csv)?;
    manifest.write()?;
    Ok(())
}

/// Runs the bias-perturbation protocol: the configured subset of the four
/// imbalance crossings over the `a` sweep, plus the additive bias
/// decomposition whenever all four crossings are present.
pub fn perturb(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let _lock = OutputLock::acquire(out)?;
    let mut manifest = Manifest::load_or_empty(out)?;
    let pcfg = cfg.perturb.as_ref().ok_or_else(|| {
        CliError::Config("field `perturb`: section is required for this stage".to_string())
    })?;
    let ids = cfg.perturb_config_ids()?;
    let spec = cfg.pipeline_spec()?;

    let mut perturb_csv = String::from(
        "run_id,config,seed,a,varied_entropy,unvaried_entropy,varied_acc,unvaried_acc,overall_acc\n",
    );
    // Soft-label tables per (a, seed, config) for the decomposition.
    let mut tables: BTreeMap<(usize, u64), [Option<ProbRows>; 4]> = BTreeMap::new();

    for &a in &pcfg.a_values {
        for &id in &ids {
            let runs = run_perturbation(id, a, &spec, pcfg.total_budget, pcfg.num_varied, &cfg.seeds)?;
            for r in runs {
                perturb_csv.push_str(&format!(
                    "{}-{}-a{}-s{},{},{},{},{},{},{},{},{}\n",
                    cfg.name,
                    id.label(),
                    a,
                    r.seed,
                    id.label(),
                    r.seed,
                    a,
                    r.varied_label_entropy,
                    r.unvaried_label_entropy,
                    r.varied_accuracy,
                    r.unvaried_accuracy,
                    r.metrics.overall_accuracy,
                ));
                let slot = match id {
                    PerturbationConfigId::C1 => 0,
                    PerturbationConfigId::C2 => 1,
                    PerturbationConfigId::C3 => 2,
                    PerturbationConfigId::C4 => 3,
                };
                tables.entry((a, r.seed)).or_default()[slot] = Some(r.label_table);
            }
        }
    }
    write_text(&out.join("perturb.csv"), &perturb_csv)?;

    let all_four = [
        PerturbationConfigId::C1,
        PerturbationConfigId::C2,
        PerturbationConfigId::C3,
        PerturbationConfigId::C4,
    ]
    .iter()
    .all(|c| ids.contains(c));
    let mut emitted = vec!["perturb.csv".to_string()];
    if all_four {
        let mut bias_csv = String::from(
            "run_id,seed,a,epsilon_t_norm,epsilon_i_norm,residual_norm,max_row_sum\n",
        );
        for ((a, seed), slots) in &tables {
            let [c1, c2, c3, c4] = slots;
            let (c1, c2, c3, c4) = (
                c1.as_ref().expect("C1 ran"),
                c2.as_ref().expect("C2 ran"),
                c3.as_ref().expect("C3 ran"),
                c4.as_ref().expect("C4 ran"),
            );
            let d = bias_decomposition(c1, c2, c3, c4)?;
            bias_csv.push_str(&format!(
                "{}-a{}-s{},{},{},{},{},{},{}\n",
                cfg.name,
                a,
                seed,
                seed,
                a,
                d.epsilon_t_norm(),
                d.epsilon_i_norm(),
                d.residual_norm(),
                d.max_row_sum_magnitude(),
            ));
        }
        write_text(&out.join("bias.csv"), &bias_csv)?;
        emitted.push("bias.csv".to_string());
    }

    stamp_run(cfg, &mut manifest);
    manifest.clear_section("perturb.");
    manifest.set(
        "perturb.a_values",
        pcfg.a_values.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(","),
    );
    manifest.set("perturb.num_varied", pcfg.num_varied.to_string());
    manifest.set("perturb.total_budget", pcfg.total_budget.to_string());
    manifest.set(
        "perturb.configs",
        ids.iter().map(|c| c.label().to_string()).collect::<Vec<_>>().join(","),
    );
    manifest.set("perturb.files", emitted.join(" "));
    manifest.write()?;
    println!(
        "perturb: {} configs x {} a-values x {} seeds",
        ids.len(),
        pcfg.a_values.len(),
        cfg.seeds.len()
    );
    Ok(())
}

/// Verifies on synthetic discrete joints that the class-conditional and
/// posterior writings of the distribution gap agree up to the
/// distillation-independent constant, and writes one full bound table.
pub fn bound_check(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let _lock = OutputLock::acquire(out)?;
    let mut manifest = Manifest::load_or_empty(out)?;
    let bcfg = cfg.bound.as_ref().ok_or_else(|| {
        CliError::Config("field `bound`: section is required for this stage".to_string())
    })?;

    let root = RngStream::new(bcfg.seed);
    let mut tr_rng = root.child(0);
    let p_tr = DiscreteJoint::random_full_support(bcfg.nx, bcfg.num_classes, &mut tr_rng);
    // Balanced test marginal over the same class-conditionals: the exact
    // prior-shift situation the gap decomposition is built for.
    let te_prior = ProbVector::uniform(bcfg.num_classes)?;
    let p_te = p_tr.reweight_classes(&te_prior)?;
    let dds: Vec<DiscreteJoint> = (0..bcfg.num_draws)
        .map(|i| {
            let mut r = root.child(100 + i as u64);
            DiscreteJoint::random_full_support(bcfg.nx, bcfg.num_classes, &mut r)
        })
        .collect();

    let max_dev = form_equivalence_check(&p_tr, &p_te, &dds)?;
    println!("bound-check: max form-equivalence deviation = {max_dev:e} over {} joints", dds.len());
    if !max_dev.is_finite() || max_dev >= FORM_AGREEMENT_TOL {
        return Err(CliError::Numeric(format!(
            "form-equivalence deviation {max_dev:e} exceeds {FORM_AGREEMENT_TOL:e}"
        )));
    }

    let report = BoundReport::assemble(
        &p_tr,
        &dds[0],
        &p_te,
        bcfg.loss_bound_constant,
        bcfg.empirical_loss,
    )?;
    let mut csv = String::from("term,value,infinite\n");
    for (name, value, infinite) in report.rows() {
        csv.push_str(&format!("{name},{value},{infinite}\n"));
    }
    csv.push_str(&format!("form_equivalence_max_deviation,{max_dev},false\n"));
    write_text(&out.join("bound.csv"), &csv)?;

    stamp_run(cfg, &mut manifest);
    manifest.clear_section("bound.");
    manifest.set("bound.nx", bcfg.nx.to_string());
    manifest.set("bound.num_classes", bcfg.num_classes.to_string());
    manifest.set("bound.num_draws", bcfg.num_draws.to_string());
    manifest.set("bound.seed", bcfg.seed.to_string());
    manifest.set("bound.loss_bound_constant", bcfg.loss_bound_constant.to_string());
    manifest.set("bound.empirical_loss", bcfg.empirical_loss.to_string());
    manifest.set("bound.max_deviation", max_dev.to_string());
    manifest.set("bound.files", "bound.csv");
    manifest.write()?;
    Ok(())
}

// ---------------------------------------------------------------------
// Report

fn parse_csv(path: &Path, produced_by: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    require_artifact(path, produced_by)?;
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| CliError::Numeric(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != header.len() {
            return Err(CliError::Numeric(format!(
                "{}: row has {} fields, header has {}",
                path.display(),
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn column(header: &[String], rows: &[Vec<String>], name: &str, path: &Path) -> Result<Vec<String>> {
    let idx = header.iter().position(|h| h == name).ok_or_else(|| {
        CliError::Numeric(format!("{}: column `{name}` not found", path.display()))
    })?;
    Ok(rows.iter().map(|r| r[idx].clone()).collect())
}

fn parse_f64(s: &str) -> f64 {
    s.parse().unwrap_or(f64::NAN)
}

fn mean_finite(values: impl Iterator<Item = f64>) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for v in values {
        if v.is_finite() {
            acc += v;
            n += 1;
        }
    }
    if n > 0 {
        acc / n as f64
    } else {
        f64::NAN
    }
}

/// Aggregates the stage CSVs into a plain-text summary plus three plots:
/// per-class confidence bars, the τ-search objective curves, and the
/// varied-class entropy trend over the `a` sweep.
pub fn report(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let _lock = OutputLock::acquire(out)?;
    let mut manifest = Manifest::load_or_empty(out)?;

    let summary_path = out.join("summary.csv");
    let (sum_h, sum_rows) = parse_csv(&summary_path, "eval")?;
    let metrics_path = out.join("metrics.csv");
    let (met_h, met_rows) = parse_csv(&metrics_path, "eval")?;

    let mut text = String::new();
    text.push_str(&format!("run: {}\n", cfg.name));
    text.push_str(&format!("seeds: {}\n\n", cfg.seeds.len()));

    text.push_str("== evaluation (balanced test set) ==\n");
    for band in ["overall_acc", "head_acc", "mid_acc", "tail_acc"] {
        let vals = column(&sum_h, &sum_rows, band, &summary_path)?;
        let mean = mean_finite(vals.iter().map(|v| parse_f64(v)));
        text.push_str(&format!("mean {band}: {mean:.6}\n"));
    }
    let taus = column(&sum_h, &sum_rows, "tau_star", &summary_path)?;
    text.push_str(&format!("tau_star per seed: {}\n\n", taus.join(", ")));

    // Per-class mean accuracy/confidence across seeds.
    let classes = column(&met_h, &met_rows, "class", &metrics_path)?;
    let accs = column(&met_h, &met_rows, "accuracy", &metrics_path)?;
    let confs = column(&met_h, &met_rows, "confidence", &metrics_path)?;
    let splits = column(&met_h, &met_rows, "split", &metrics_path)?;
    let num_classes = cfg.data.num_classes;
    let mut acc_by_class = vec![Vec::new(); num_classes];
    let mut conf_by_class = vec![Vec::new(); num_classes];
    let mut split_by_class = vec![String::new(); num_classes];
    for i in 0..classes.len() {
        let c: usize = classes[i]
            .parse()
            .map_err(|e| CliError::Numeric(format!("metrics.csv class column: {e}")))?;
        if c >= num_classes {
            return Err(CliError::Numeric(format!(
                "metrics.csv names class {c}, config has {num_classes}"
            )));
        }
        acc_by_class[c].push(parse_f64(&accs[i]));
        conf_by_class[c].push(parse_f64(&confs[i]));
        split_by_class[c] = splits[i].clone();
    }
    text.push_str("== per-class means across seeds ==\n");
    text.push_str("class split accuracy confidence\n");
    let mut bars = Vec::new();
    for c in 0..num_classes {
        let acc = mean_finite(acc_by_class[c].iter().copied());
        let conf = mean_finite(conf_by_class[c].iter().copied());
        text.push_str(&format!("{c} {} {acc:.6} {conf:.6}\n", split_by_class[c]));
        bars.push((c.to_string(), conf));
    }
    write_text(
        &out.join("confidence_bars.svg"),
        &plot::bar_chart(
            "mean ground-truth confidence by class",
            "class",
            "confidence",
            &bars,
        ),
    )?;

    // τ-objective curves, one series per seed.
    let mut tau_series = Vec::new();
    for &seed in &cfg.seeds {
        let path = out.join(calibration_file(seed));
        let (h, rows) = parse_csv(&path, "calibrate")?;
        let taus = column(&h, &rows, "tau", &path)?;
        let objs = column(&h, &rows, "objective", &path)?;
        let pts: Vec<(f64, f64)> = taus
            .iter()
            .zip(&objs)
            .map(|(t, o)| (parse_f64(t), parse_f64(o)))
            .collect();
        tau_series.push((format!("seed {seed}"), pts));
    }
    write_text(
        &out.join("tau_curve.svg"),
        &plot::line_chart(
            "confidence-spread objective over tau",
            "tau",
            "objective",
            &tau_series,
        ),
    )?;

    let mut emitted = vec![
        "report.txt".to_string(),
        "confidence_bars.svg".to_string(),
        "tau_curve.svg".to_string(),
    ];

    // Entropy trend over the a-sweep (perturbation protocol), if run.
    if let Some(pcfg) = &cfg.perturb {
        let path = out.join("perturb.csv");
        let (h, rows) = parse_csv(&path, "perturb")?;
        let configs = column(&h, &rows, "config", &path)?;
        let a_col = column(&h, &rows, "a", &path)?;
        let ent = column(&h, &rows, "varied_entropy", &path)?;
        let ids = cfg.perturb_config_ids()?;
        let trend_id = if ids.contains(&PerturbationConfigId::C3) {
            PerturbationConfigId::C3
        } else {
            ids[0]
        };
        text.push_str(&format!(
            "\n== varied-class soft-label entropy vs a ({}) ==\n",
            trend_id.label()
        ));
        let mut pts = Vec::new();
        for &a in &pcfg.a_values {
            let vals = (0..rows.len()).filter_map(|i| {
                (configs[i] == trend_id.label() && a_col[i] == a.to_string())
                    .then(|| parse_f64(&ent[i]))
            });
            let mean = mean_finite(vals);
            text.push_str(&format!("a={a}: {mean:.6}\n"));
            pts.push((a as f64, mean));
        }
        write_text(
            &out.join("entropy_trend.svg"),
            &plot::line_chart(
                "varied-class soft-label entropy vs sample count",
                "a (varied-class samples)",
                "mean entropy",
                &[(trend_id.label().to_string(), pts)],
            ),
        )?;
        emitted.push("entropy_trend.svg".to_string());
    }

    write_text(&out.join("report.txt"), &text)?;
    stamp_run(cfg, &mut manifest);
    manifest.clear_section("report.");
    manifest.set("report.files", emitted.join(" "));
    manifest.write()?;
    println!("report: wrote {}", emitted.join(", "));
    Ok(())
}

// Re-exported for `main` so stage dispatch reads as a table.
pub use self::relabel_stage as relabel_cmd;

/// Stage list in pipeline order with their artifact hints; used by the
/// top-level `--help` epilogue.
pub const STAGE_ORDER: &[(&str, &str)] = &[
    ("make-data", "train/test sets per seed"),
    ("train-teacher", "teacher checkpoints"),
    ("distill", "distilled feature sets"),
    ("relabel", "per-epoch soft labels"),
    ("calibrate", "tau search traces"),
    ("eval", "metrics.csv, summary.csv"),
    ("perturb", "perturb.csv, bias.csv"),
    ("bound-check", "bound.csv"),
    ("report", "report.txt and SVG plots"),
];

pub fn resolve_out_dir(cfg: &ExperimentConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.out_dir.clone())
}
