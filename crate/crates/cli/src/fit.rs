//! `fit` and `apply`: calibration maps from traces with a ground truth.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use covcal_core::calmaps::{
    fit_matrix, fit_scalar, matrix_objective, train_mlp, CalibrationMap, InputSpec, LossWeights,
    MatrixFitOptions, MatrixMap, MlpPreset, OutputForm, TrainOptions,
};
use covcal_core::report::{apply_map, training_set_from_traces, GroundTruthMode};

use crate::error::{CliError, CliResult};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Scalar,
    Matrix,
    Mlp,
    MlpState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Output {
    Square,
    Cholesky,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Weights {
    Uniform,
    Ekf2d,
    Vio,
}

/// Network settings given on the command line; each overrides the preset.
#[derive(Debug, Clone, Default)]
pub struct NetworkArgs {
    pub preset: Option<String>,
    pub hidden: Option<Vec<usize>>,
    pub epochs: Option<usize>,
    pub l2: Option<f64>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub output: Option<Output>,
    pub weights: Option<Weights>,
}

pub struct FitArgs {
    pub traces: Vec<PathBuf>,
    pub method: Method,
    pub ground_truth: GroundTruthMode,
    pub network: NetworkArgs,
    pub seed: u64,
}

fn network_options(
    method: Method,
    net: &NetworkArgs,
    dim: usize,
    seed: u64,
) -> CliResult<(TrainOptions, LossWeights)> {
    let input = if method == Method::MlpState {
        InputSpec::StateAndCovariance
    } else {
        InputSpec::Covariance
    };
    let (mut opts, mut weights) = match &net.preset {
        Some(name) => {
            let p = MlpPreset::by_name(name).map_err(|e| CliError::usage(e.to_string()))?;
            if p.input != input {
                let want = if p.input == InputSpec::StateAndCovariance {
                    "mlp-state"
                } else {
                    "mlp"
                };
                return Err(CliError::usage(format!(
                    "preset {name} needs --method {want}"
                )));
            }
            (p.options(seed), p.loss_weights())
        }
        None => (
            TrainOptions {
                input,
                seed,
                ..TrainOptions::default()
            },
            LossWeights::uniform(dim),
        ),
    };
    if let Some(h) = &net.hidden {
        opts.hidden = h.clone();
    }
    if let Some(e) = net.epochs {
        opts.epochs = e;
    }
    if let Some(l2) = net.l2 {
        opts.l2 = l2;
    }
    if let Some(lr) = net.lr {
        opts.learning_rate = lr;
    }
    if let Some(b) = net.batch {
        opts.batch_size = b;
    }
    if let Some(o) = net.output {
        opts.output = match o {
            Output::Square => OutputForm::Square,
            Output::Cholesky => OutputForm::Cholesky,
        };
    }
    if let Some(w) = net.weights {
        weights = match w {
            Weights::Uniform => LossWeights::uniform(dim),
            Weights::Ekf2d => LossWeights::ekf2d(),
            Weights::Vio => LossWeights::vio(),
        };
    }
    if weights.dim != dim {
        return Err(CliError::usage(format!(
            "loss weights are for dimension {}, the traces have {dim}",
            weights.dim
        )));
    }
    Ok((opts, weights))
}

/// Fits the map and its training curve (`step,objective` CSV).
pub fn fit(args: &FitArgs) -> CliResult<(CalibrationMap, String)> {
    let traces = io::load_traces(&io::trace_paths(&args.traces)?)?;
    if args.ground_truth == GroundTruthMode::None {
        return Err(CliError::usage("fitting needs --gt mc or --gt ergodic:K"));
    }
    let ts = training_set_from_traces(&traces, args.ground_truth)?;
    let mut curve = String::from("step,objective\n");
    let map = match args.method {
        Method::Scalar => {
            let s = fit_scalar(&ts)?;
            let obj = matrix_objective(&ts, &MatrixMap::scaled_identity(ts.dim(), s.s.sqrt()));
            writeln!(curve, "0,{obj:?}").expect("string write");
            log::info!("scalar fit s = {}", s.s);
            CalibrationMap::Scalar(s)
        }
        Method::Matrix => {
            let s = fit_scalar(&ts)?;
            let f = fit_matrix(
                &ts,
                &MatrixMap::scaled_identity(ts.dim(), s.s.sqrt()),
                &MatrixFitOptions::default(),
            )?;
            for (i, v) in f.history.iter().enumerate() {
                writeln!(curve, "{i},{v:?}").expect("string write");
            }
            log::info!(
                "matrix fit: objective {:e} -> {:e} in {} iterations",
                f.initial_objective,
                f.objective,
                f.iterations
            );
            CalibrationMap::Matrix(f.map)
        }
        Method::Mlp | Method::MlpState => {
            let (opts, weights) = network_options(args.method, &args.network, ts.dim(), args.seed)?;
            let (map, rep) = train_mlp(&ts, &opts, &weights)?;
            writeln!(curve, "0,{:?}", rep.initial_loss).expect("string write");
            for (i, v) in rep.epoch_losses.iter().enumerate() {
                writeln!(curve, "{},{v:?}", i + 1).expect("string write");
            }
            log::info!(
                "network loss {:e} -> {:e} after {} epochs",
                rep.initial_loss,
                rep.final_loss(),
                opts.epochs
            );
            CalibrationMap::Mlp(map)
        }
    };
    Ok((map, curve))
}

pub fn run_fit(args: &FitArgs, out: &Path) -> CliResult<CalibrationMap> {
    let (map, curve) = fit(args)?;
    io::ensure_parent(out)?;
    io::write_text(out, &(map.to_json()? + "\n"))?;
    io::write_text(&io::sibling(out, ".curve.csv"), &curve)?;
    Ok(map)
}

/// Writes each adjusted trace under `out` with its original file name.
pub fn run_apply(model: &Path, traces: &[PathBuf], out: &Path) -> CliResult<Vec<PathBuf>> {
    let map = CalibrationMap::from_json(&io::read_text(model)?)
        .map_err(|e| CliError::from(e).at(model))?;
    let paths = io::trace_paths(traces)?;
    io::create_dir(out)?;
    let mut written = Vec::with_capacity(paths.len());
    for p in &paths {
        let trace = io::load_traces(std::slice::from_ref(p))?.remove(0);
        if let Some(n) = map.dim().filter(|&n| n != trace.dim()) {
            return Err(CliError::usage(format!(
                "{}: trace dimension {} does not match the map's {n}",
                p.display(),
                trace.dim()
            )));
        }
        let adjusted = apply_map(&map, &trace).map_err(|e| CliError::from(e).at(p))?;
        let dest = out.join(p.file_name().expect("trace paths are files"));
        io::save_trace(&adjusted, &dest)?;
        written.push(dest);
    }
    Ok(written)
}
