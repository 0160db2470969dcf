//! Monte-Carlo experiment drivers for the Dubins benchmark: simulated runs per
//! input sequence, Monte-Carlo ground truth, training sets and per-run
//! divergence evaluation.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calmaps::{CalibrationMap, TrainingSample, TrainingSet};
use crate::error::{Error, Result};
use crate::filters::{simulate_mismatched, EstimateTrace};
use crate::groundtruth::{ground_truth_nees, mc_ground_truth, ErrorSeries, GroundTruthCovSeries};
use crate::statmath::{
    mean_std, nees_divergence, nees_regularized, Binning, CovMatrix, NeesSeries,
};
use crate::systems::{
    dubins_config, dubins_model, generate_sequences, DubinsNoise, InputSequenceSpec,
    DEFAULT_SEQUENCE_STEPS, SEQUENCE_COUNT, TEST_SEQUENCE,
};

/// Speed and heading process variances of the simulated vehicle. The filter
/// keeps the defaults, so its covariance is too small in both.
pub const DUBINS_TRUTH_VELOCITY_VARIANCE: f64 = 3e-3;
pub const DUBINS_TRUTH_HEADING_VARIANCE: f64 = 1e-3;

pub fn dubins_truth_noise() -> DubinsNoise {
    let mut noise = DubinsNoise::default();
    let d = [
        1e-6,
        1e-6,
        DUBINS_TRUTH_VELOCITY_VARIANCE,
        DUBINS_TRUTH_HEADING_VARIANCE,
    ];
    noise.process = CovMatrix::from_diagonal(&d);
    noise
}

/// Seed of Monte-Carlo run `run` of input sequence `sequence`.
pub fn run_seed(seed: u64, sequence: usize, run: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((sequence as u64) << 32 | run as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DubinsExperiment {
    pub filter_noise: DubinsNoise,
    pub truth_noise: DubinsNoise,
    pub sequences: Vec<InputSequenceSpec>,
    pub test_sequence: usize,
    pub mc_runs: usize,
    pub seed: u64,
}

impl DubinsExperiment {
    pub fn new(seed: u64) -> Self {
        Self {
            filter_noise: DubinsNoise::default(),
            truth_noise: dubins_truth_noise(),
            sequences: generate_sequences(SEQUENCE_COUNT, DEFAULT_SEQUENCE_STEPS, seed),
            test_sequence: TEST_SEQUENCE,
            mc_runs: 50,
            seed,
        }
    }

    pub fn training_sequences(&self) -> Vec<usize> {
        (0..self.sequences.len())
            .filter(|&s| s != self.test_sequence)
            .collect()
    }

    pub fn run_seed(&self, sequence: usize, run: usize) -> u64 {
        run_seed(self.seed, sequence, run)
    }

    /// `mc_runs` independent runs of one sequence, in run order.
    pub fn simulate_sequence(&self, sequence: usize) -> Result<Vec<EstimateTrace>> {
        let spec = self
            .sequences
            .get(sequence)
            .ok_or_else(|| Error::invalid(format!("no input sequence {sequence}")))?;
        let truth = dubins_model(self.truth_noise.clone())?;
        let filter = dubins_model(self.filter_noise.clone())?;
        (0..self.mc_runs)
            .into_par_iter()
            .map(|r| {
                simulate_mismatched(
                    &truth,
                    &filter,
                    &dubins_config(spec, self.run_seed(sequence, r)),
                )
            })
            .collect()
    }

    pub fn sequence_runs(&self, sequence: usize) -> Result<SequenceRuns> {
        SequenceRuns::new(self.simulate_sequence(sequence)?)
    }

    /// Pairs `(P̂, x̂)` from the first `input_runs` runs of every training
    /// sequence with that sequence's Monte-Carlo ground truth.
    pub fn training_set(&self, input_runs: usize, with_state: bool) -> Result<TrainingSet> {
        let per_seq = self
            .training_sequences()
            .into_par_iter()
            .map(|s| Ok((s, self.sequence_runs(s)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut samples = Vec::new();
        for (s, runs) in per_seq {
            samples.extend(runs.training_samples(s, input_runs, with_state)?);
        }
        TrainingSet::new(samples)
    }
}

/// Monte-Carlo runs of one sequence with their errors and ground truth.
#[derive(Debug, Clone)]
pub struct SequenceRuns {
    pub traces: Vec<EstimateTrace>,
    pub errors: Vec<ErrorSeries>,
    pub ground_truth: GroundTruthCovSeries,
}

impl SequenceRuns {
    pub fn new(traces: Vec<EstimateTrace>) -> Result<Self> {
        let errors = traces
            .iter()
            .map(ErrorSeries::from_trace)
            .collect::<Result<Vec<_>>>()?;
        let ground_truth = mc_ground_truth(&errors)?;
        Ok(Self {
            traces,
            errors,
            ground_truth,
        })
    }

    pub fn training_samples(
        &self,
        sequence: usize,
        input_runs: usize,
        with_state: bool,
    ) -> Result<Vec<TrainingSample>> {
        if input_runs == 0 || input_runs > self.traces.len() {
            return Err(Error::invalid(format!(
                "cannot take {input_runs} of {} runs",
                self.traces.len()
            )));
        }
        let mut out = Vec::new();
        for trace in &self.traces[..input_runs] {
            for (k, (rec, gt)) in trace
                .records
                .iter()
                .zip(&self.ground_truth.covariances)
                .enumerate()
            {
                let Some(gt) = gt else { continue };
                out.push(TrainingSample {
                    p_hat: rec.p_hat.clone(),
                    x_hat: with_state.then(|| rec.x_hat.as_slice().to_vec()),
                    p_target: gt.clone(),
                    sequence,
                    step: k,
                });
            }
        }
        Ok(out)
    }

    /// Divergence of each run's NEES under the filter covariances transformed
    /// by `map`.
    pub fn map_divergences(&self, map: &CalibrationMap, binning: Binning) -> Result<Vec<f64>> {
        self.traces
            .par_iter()
            .zip(&self.errors)
            .map(|(trace, errors)| {
                let p_hat = trace.covariances();
                let x_hat: Vec<DVector<f64>> =
                    trace.records.iter().map(|r| r.x_hat.clone()).collect();
                let adjusted = map.apply_all(&p_hat, map.needs_state().then_some(&x_hat[..]))?;
                let values = errors
                    .errors()
                    .iter()
                    .zip(&adjusted)
                    .map(|(e, p)| nees_regularized(e, p))
                    .collect::<Result<Vec<_>>>()?;
                nees_divergence(&NeesSeries::new(values, errors.dim() as u32)?, binning)
            })
            .collect()
    }

    /// Divergence of each run's NEES under the Monte-Carlo ground truth.
    pub fn ground_truth_divergences(&self, binning: Binning) -> Result<Vec<f64>> {
        self.errors
            .par_iter()
            .map(|e| nees_divergence(&ground_truth_nees(e, &self.ground_truth)?, binning))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSummary {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

impl DivergenceSummary {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("divergence values"));
        }
        let (mean, std) = mean_std(values);
        Ok(Self {
            mean,
            std,
            runs: values.len(),
        })
    }
}
