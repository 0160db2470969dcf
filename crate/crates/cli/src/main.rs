#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! `covcal`: simulate benchmarks, evaluate estimator consistency, and fit and
//! apply covariance calibration maps.

mod align;
mod error;
mod evaluate;
mod fit;
mod io;
mod simulate;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use covcal_core::report::GroundTruthMode;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "covcal",
    version,
    about = "Covariance calibration for state estimators"
)]
struct Cli {
    /// Seed for simulation, resampling and training.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

fn parse_gt(s: &str) -> Result<GroundTruthMode, String> {
    s.parse().map_err(|e: covcal_core::Error| e.to_string())
}

fn parse_hidden(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .map_err(|_| CliError::usage(format!("bad layer width {w:?}")))
        })
        .collect()
}

#[derive(Debug, clap::Args)]
struct Histogram {
    /// Fixed number of histogram bins instead of ⌈√N⌉.
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a benchmark system and write one trace per run plus a manifest.
    Simulate {
        /// TOML config naming the system.
        config: PathBuf,
        /// Monte-Carlo runs (overrides the config).
        #[arg(long)]
        runs: Option<usize>,
    },
    /// NEES, σ-counts and divergence of traces, with an optional ground truth.
    Evaluate {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Ground truth: mc, ergodic:K or none.
        #[arg(long, default_value = "none", value_parser = parse_gt)]
        gt: GroundTruthMode,
        /// Expected NEES degrees of freedom; checked against the traces.
        #[arg(long)]
        dof: Option<u32>,
        /// One divergence per trace instead of resampled groups.
        #[arg(long)]
        per_sequence: bool,
        /// Resampled groups per divergence.
        #[arg(long, default_value_t = 50)]
        groups: usize,
        /// NEES values per resampled group.
        #[arg(long, default_value_t = 200)]
        group_size: usize,
        #[command(flatten)]
        hist: Histogram,
    },
    /// Fit a calibration map to ground-truth covariances.
    Fit {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long, value_enum)]
        method: fit::Method,
        /// Training targets: mc or ergodic:K.
        #[arg(long, value_parser = parse_gt)]
        gt: GroundTruthMode,
        /// Network preset: ekf2d-h3, ekf2d-h4, vio-h3 or vio-h4.
        #[arg(long)]
        preset: Option<String>,
        /// Hidden layer widths, e.g. 128,64.
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Weight decay on the network weights.
        #[arg(long)]
        l2: Option<f64>,
        /// Adam learning rate.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        /// Network output factor: full square or lower-triangular.
        #[arg(long, value_enum)]
        output: Option<fit::Output>,
        /// Per-entry loss weights.
        #[arg(long, value_enum)]
        weights: Option<fit::Weights>,
    },
    /// Replace each trace's covariances with a fitted map's output.
    Apply {
        model: PathBuf,
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
    /// Align a ground-truth pose log to an estimate trace.
    Align {
        /// CSV with columns t,px,py,pz and optionally rx,ry,rz.
        gt: PathBuf,
        estimate: PathBuf,
        /// Derive velocity truth by backdifferencing aligned positions.
        #[arg(long)]
        backdiff_velocity: bool,
    },
    /// Score ergodic window sizes by the divergence of the resulting NEES.
    WindowSearch {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Odd windows lo:hi:step.
        #[arg(long, default_value = "27:601:2")]
        range: String,
        #[arg(long)]
        dof: Option<u32>,
        #[command(flatten)]
        hist: Histogram,
    },
    /// Comparison table from evaluation directories, recomputed from their NEES files.
    Report {
        /// Evaluation of the unadjusted estimator (with a ground truth).
        #[arg(long)]
        baseline: PathBuf,
        /// Evaluation of an adjusted estimator, as NAME=DIR; repeatable.
        #[arg(long = "method", value_parser = evaluate::parse_method)]
        methods: Vec<(String, PathBuf)>,
    },
}

fn out_or<'a>(out: &'a Option<PathBuf>, default: &'a str) -> &'a Path {
    out.as_deref().unwrap_or(Path::new(default))
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot start {t} threads: {e}")))?;
    }
    let out = &cli.out;
    match cli.command {
        Command::Simulate { config, runs } => {
            let dir = out_or(out, "traces");
            let m = simulate::run(&config, cli.seed, runs, dir)?;
            println!("wrote {} traces to {}", m.files.len(), dir.display());
        }
        Command::Evaluate {
            traces,
            gt,
            dof,
            per_sequence,
            groups,
            group_size,
            hist,
        } => {
            let args = evaluate::EvaluateArgs {
                traces,
                ground_truth: gt,
                dof,
                per_sequence,
                groups,
                group_size,
                bins: hist.bins,
                seed: cli.seed,
            };
            let table = evaluate::run(&args, out_or(out, "evaluation"))?;
            print!("{}", table.to_text());
        }
        Command::Fit {
            traces,
            method,
            gt,
            preset,
            arch,
            epochs,
            l2,
            lr,
            batch,
            output,
            weights,
        } => {
            let hidden = arch.as_deref().map(parse_hidden).transpose()?;
            let network = fit::NetworkArgs {
                preset,
                hidden,
                epochs,
                l2,
                lr,
                batch,
                output,
                weights,
            };
            let args = fit::FitArgs {
                traces,
                method,
                ground_truth: gt,
                network,
                seed: cli.seed,
            };
            let path = out_or(out, "model.json");
            let map = fit::run_fit(&args, path)?;
            println!("wrote {} map to {}", map.name(), path.display());
        }
        Command::Apply { model, traces } => {
            let dir = out_or(out, "adjusted");
            let written = fit::run_apply(&model, &traces, dir)?;
            println!("wrote {} traces to {}", written.len(), dir.display());
        }
        Command::Align {
            gt,
            estimate,
            backdiff_velocity,
        } => {
            let path = out_or(out, "aligned.csv");
            let rep = align::run_align(&gt, &estimate, backdiff_velocity, path)?;
            println!(
                "aligned {} poses, rms residual {:e}, wrote {}",
                rep.points,
                rep.rms_residual,
                path.display()
            );
        }
        Command::WindowSearch {
            traces,
            range,
            dof,
            hist,
        } => {
            let args = align::WindowArgs {
                traces,
                range: io::parse_range(&range)?,
                dof,
                bins: hist.bins,
            };
            let s = align::run_window_search(&args, out_or(out, "window_search.csv"))?;
            println!(
                "best window {} (divergence {:.6})",
                s.best_window, s.best_divergence
            );
        }
        Command::Report { baseline, methods } => {
            let table = evaluate::report(&baseline, &methods, out.as_deref())?;
            print!("{}", table.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
