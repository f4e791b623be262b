//! `ltlab` — stage-by-stage runner for long-tailed distillation
//! experiments.
//!
//! Every subcommand reads the same TOML config and works inside one output
//! directory; stages exchange data only through the artifact files and the
//! run manifest, so each can be re-run or swapped independently. All
//! outputs are pure functions of the config, which makes reruns
//! byte-identical.
//!
//! Exit codes: 1 config error, 2 numeric failure, 3 missing input
//! artifact.

mod config;
mod error;
mod manifest;
mod plot;
mod stages;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::Result;

#[derive(Parser)]
#[command(
    name = "ltlab",
    version,
    about = "Long-tailed dataset distillation laboratory",
    after_help = stage_help()
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

fn stage_help() -> String {
    let mut s = String::from("Pipeline order:\n");
    for (name, what) in stages::STAGE_ORDER {
        s.push_str(&format!("  {name:<14} -> {what}\n"));
    }
    s
}

#[derive(Args)]
struct StageArgs {
    /// Path to the experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample the long-tailed training set and balanced test set per seed.
    MakeData(StageArgs),
    /// Train the teacher model on each seed's training set.
    TrainTeacher(StageArgs),
    /// Synthesize the balanced distilled set from each teacher.
    Distill(StageArgs),
    /// Generate per-epoch soft labels for the distilled items.
    Relabel(StageArgs),
    /// Search the prior-compensation strength tau* per seed.
    Calibrate(StageArgs),
    /// Train and score the evaluation model; writes metrics/summary CSVs.
    Eval(StageArgs),
    /// Run the four imbalance crossings over the `a` sweep.
    Perturb(StageArgs),
    /// Check the two writings of the distribution gap agree; write the
    /// bound term table.
    BoundCheck(StageArgs),
    /// Aggregate CSVs into a text summary and SVG plots.
    Report(StageArgs),
}

fn dispatch(cmd: &Cmd) -> Result<()> {
    let (args, stage): (&StageArgs, fn(&ExperimentConfig, &std::path::Path) -> Result<()>) =
        match cmd {
            Cmd::MakeData(a) => (a, stages::make_data),
            Cmd::TrainTeacher(a) => (a, stages::train_teacher),
            Cmd::Distill(a) => (a, stages::distill),
            Cmd::Relabel(a) => (a, stages::relabel_cmd),
            Cmd::Calibrate(a) => (a, stages::calibrate),
            Cmd::Eval(a) => (a, stages::eval),
            Cmd::Perturb(a) => (a, stages::perturb),
            Cmd::BoundCheck(a) => (a, stages::bound_check),
            Cmd::Report(a) => (a, stages::report),
        };
    let cfg = ExperimentConfig::load(&args.config)?;
    let out = stages::resolve_out_dir(&cfg, &args.out);
    stage(&cfg, &out)
}

fn main() {
    let cli = Cli::parse();
    match dispatch(&cli.cmd) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
