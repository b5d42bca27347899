//! `earlyrec`: drive the early-recognition pipeline from JSON configs.
//!
//! Every subcommand follows the same grammar —
//! `earlyrec <subcommand> --config <path> [--seed N] [--out DIR]
//! [--override key=value ...]` — and writes its artifacts plus a
//! provenance manifest under the run directory. Exit codes: 0 success,
//! 1 validation error (bad config, missing artifact), 2 runtime or
//! numerical failure.

mod config;
mod manifest;
mod plot;
mod stages;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// A problem with the request itself (config, flags, missing artifacts),
/// as opposed to a failure while executing it. Drives the exit code.
#[derive(Debug)]
pub struct Validation(String);

impl fmt::Display for Validation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Validation {}

pub fn invalid(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Validation(message.into()))
}

#[derive(Parser)]
#[command(name = "earlyrec", version, about = "Early-recognition training and evaluation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and save it as NDJSON.
    Generate(StageArgs),
    /// Fine-tune the frame encoder on sub-video pooled embeddings.
    FinetuneEncoder(StageArgs),
    /// Train the recurrent classifier on frozen encoder features.
    TrainTeacher(StageArgs),
    /// Train the future-state-predicting student against a frozen teacher.
    TrainFsp(StageArgs),
    /// Score a checkpoint on the test split across a checkpoint grid.
    Evaluate(StageArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(StageArgs),
    /// Sweep delta/lambda/future-loss cells against one teacher.
    Ablate(StageArgs),
    /// Render accuracy-curve CSVs as an SVG chart.
    Plot(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's seed and feeds every stage default.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; replaces the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path config override, e.g. --override teacher.hidden_dim=32.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code_for(&e)
        }
    }
}

fn dispatch(cmd: Cmd) -> anyhow::Result<()> {
    let (name, args): (&str, &StageArgs) = match &cmd {
        Cmd::Generate(a) => ("generate", a),
        Cmd::FinetuneEncoder(a) => ("finetune-encoder", a),
        Cmd::TrainTeacher(a) => ("train-teacher", a),
        Cmd::TrainFsp(a) => ("train-fsp", a),
        Cmd::Evaluate(a) => ("evaluate", a),
        Cmd::Gradcheck(a) => ("gradcheck", a),
        Cmd::Ablate(a) => ("ablate", a),
        Cmd::Plot(a) => ("plot", a),
    };
    let cfg =
        config::load_config(&args.config, args.seed, args.out.as_deref(), &args.overrides)?;
    match name {
        "generate" => stages::generate(cfg),
        "finetune-encoder" => stages::finetune_encoder_cmd(cfg),
        "train-teacher" => stages::train_teacher_cmd(cfg),
        "train-fsp" => stages::train_fsp_cmd(cfg),
        "evaluate" => stages::evaluate_cmd(cfg),
        "gradcheck" => stages::gradcheck_cmd(cfg),
        "ablate" => stages::ablate_cmd(cfg),
        "plot" => stages::plot_cmd(cfg),
        _ => unreachable!(),
    }
}

/// 1 for problems with the request (including the library's input
/// rejections), 2 for failures while carrying it out.
fn exit_code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<Validation>() {
            return 1;
        }
        if let Some(core) = cause.downcast_ref::<earlyrec_core::error::Error>() {
            use earlyrec_core::error::Error::*;
            return match core {
                InvalidArgument(_) | DimensionMismatch(_) | Parse { .. } | Format { .. }
                | MissingInput(_) => 1,
                Io { .. } | NonFinite(_) => 2,
            };
        }
    }
    2
}
