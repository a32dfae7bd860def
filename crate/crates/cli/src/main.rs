//! `dmtrack`: synthetic data, training, tracking and evaluation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmtrack_core::Error;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "dmtrack", version, about = "Motion-only multi-object tracking", after_help = RunConfig::defaults_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key; repeatable. Wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed (same as `--set seed=N`).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[(&str, Option<String>)]) -> dmtrack_core::Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        for (k, v) in extra {
            if let Some(v) = v {
                overrides.push(format!("{k}={v}"));
            }
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic sequence: gt.txt, det.txt, det_origin.txt, scenario.json.
    #[command(after_help = RunConfig::defaults_help())]
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Scenario preset (same as `--set preset=NAME`).
        #[arg(long)]
        preset: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the learned predictor and gate on ground-truth tracks.
    #[command(after_help = RunConfig::defaults_help())]
    Train {
        /// Sequence directories written by `synth`; repeatable.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// Checkpoint path, rewritten after every epoch.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-epoch loss CSV (default: checkpoint path with `.loss.csv`).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Continue from the optimizer state stored in `--checkpoint`.
        #[arg(long)]
        resume: bool,
        /// Epoch count (same as `--set epochs=N`).
        #[arg(long)]
        epochs: Option<u32>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Track detections and write MOT results.
    #[command(after_help = RunConfig::defaults_help())]
    Track {
        /// MOT detection file.
        #[arg(long)]
        det: PathBuf,
        /// Trained checkpoint; not needed with --kalman-only.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Results file.
        #[arg(long)]
        out: PathBuf,
        /// Gate forced to 1: plain Kalman + two-stage association baseline.
        #[arg(long)]
        kalman_only: bool,
        /// Last frame to process (default: last frame in the detections).
        #[arg(long)]
        frames: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score results against ground truth (MOTA, IDF1, IDSW, FP, FN).
    #[command(after_help = RunConfig::defaults_help())]
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        results: PathBuf,
        /// Also write the summary as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Row label in the report.
        #[arg(long, default_value = "results")]
        name: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare analytic and finite-difference gradients of every learnable part.
    #[command(after_help = RunConfig::defaults_help())]
    Gradcheck {
        /// Seeded trials per component.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, hide = true, default_value_t = 0.0)]
        corrupt_gradient: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Per-result-row CSV for plotting.
    ///
    /// Columns, in this order: frame, id, cx, cy, w, h, conf, matched_gt_id,
    /// iou. `matched_gt_id` is -1 (and `iou` 0) for rows matched to no
    /// ground-truth box.
    #[command(after_help = RunConfig::defaults_help())]
    Plotdata {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
