use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ekf_predict, ekf_update, FilterState, SystemModel};
use crate::error::{Error, Result};
use crate::statmath::{eig_symmetric, CovMatrix};

// Independent ChaCha streams under one seed.
const STREAM_INITIAL: u64 = 0;
const STREAM_PROCESS: u64 = 1;
const STREAM_MEASUREMENT: u64 = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub steps: usize,
    pub dt: f64,
    pub x0_true: Vec<f64>,
    pub x0_hat: Vec<f64>,
    pub p0: CovMatrix,
    /// `inputs[k]` drives the transition from step `k` to `k + 1`.
    pub inputs: Vec<Vec<f64>>,
    /// Draw the initial estimate as `x0_hat + N(0, p0)` so the initial error
    /// is consistent with `p0`.
    #[serde(default)]
    pub perturb_initial: bool,
}

impl SimConfig {
    fn validate(&self, model: &dyn SystemModel) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("simulation needs at least one step"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("time step must be positive"));
        }
        let n = model.state_dim();
        if self.x0_true.len() != n || self.x0_hat.len() != n || self.p0.dim() != n {
            return Err(Error::invalid(format!(
                "initial state must have dimension {n}"
            )));
        }
        if self.inputs.len() < self.steps {
            return Err(Error::invalid(format!(
                "{} inputs supplied for {} steps",
                self.inputs.len(),
                self.steps
            )));
        }
        if let Some(u) = self.inputs.iter().find(|u| u.len() != model.input_dim()) {
            return Err(Error::invalid(format!(
                "input of length {} for a model with {} inputs",
                u.len(),
                model.input_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub k: usize,
    pub t: f64,
    pub x_true: DVector<f64>,
    pub x_hat: DVector<f64>,
    pub p_hat: CovMatrix,
    pub y: DVector<f64>,
    pub innovation: DVector<f64>,
}

impl TraceRecord {
    pub fn error(&self) -> DVector<f64> {
        &self.x_true - &self.x_hat
    }
}

/// Truth, measurements and filter output for one simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateTrace {
    pub dt: f64,
    pub records: Vec<TraceRecord>,
}

impl EstimateTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn errors(&self) -> Vec<DVector<f64>> {
        self.records.iter().map(TraceRecord::error).collect()
    }

    pub fn covariances(&self) -> Vec<CovMatrix> {
        self.records.iter().map(|r| r.p_hat.clone()).collect()
    }

    pub fn innovations(&self) -> Vec<DVector<f64>> {
        self.records.iter().map(|r| r.innovation.clone()).collect()
    }
}

/// `L` with `L Lᵀ = cov`, valid for singular PSD input.
fn noise_factor(cov: &CovMatrix) -> Result<DMatrix<f64>> {
    let eig = eig_symmetric(cov)?;
    let mut f = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    Ok(f)
}

fn draw(factor: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let z = DVector::from_fn(factor.ncols(), |_, _| StandardNormal.sample(rng));
    factor * z
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Runs truth, measurements and filter in lockstep under one model.
pub fn simulate(model: &dyn SystemModel, cfg: &SimConfig) -> Result<EstimateTrace> {
    simulate_mismatched(model, model, cfg)
}

/// Like [`simulate`], but the truth and measurements are generated by
/// `truth` while the filter runs `filter`. The two must share dimensions and
/// are normally the same dynamics with different noise statistics.
pub fn simulate_mismatched(
    truth: &dyn SystemModel,
    filter: &dyn SystemModel,
    cfg: &SimConfig,
) -> Result<EstimateTrace> {
    cfg.validate(filter)?;
    if truth.state_dim() != filter.state_dim()
        || truth.measurement_dim() != filter.measurement_dim()
    {
        return Err(Error::invalid(
            "truth and filter models differ in dimension",
        ));
    }
    let process = noise_factor(truth.process_noise())?;
    let measurement = noise_factor(truth.measurement_noise())?;
    let mut rng_process = stream(cfg.seed, STREAM_PROCESS);
    let mut rng_measurement = stream(cfg.seed, STREAM_MEASUREMENT);

    let mut x_true = DVector::from_column_slice(&cfg.x0_true);
    let mut x0_hat = DVector::from_column_slice(&cfg.x0_hat);
    if cfg.perturb_initial {
        x0_hat += draw(
            &noise_factor(&cfg.p0)?,
            &mut stream(cfg.seed, STREAM_INITIAL),
        );
    }
    let mut state = FilterState::new(x0_hat, cfg.p0.clone())?;
    let mut records = Vec::with_capacity(cfg.steps);

    for k in 1..=cfg.steps {
        let u = DVector::from_column_slice(&cfg.inputs[k - 1]);
        x_true = truth.propagate(&x_true, &u, cfg.dt) + draw(&process, &mut rng_process);
        let y = truth.measure(&x_true)? + draw(&measurement, &mut rng_measurement);
        let predicted = ekf_predict(&state, &u, filter, cfg.dt)?;
        let (posterior, innovation) = ekf_update(&predicted, &y, filter).map_err(|e| match e {
            Error::DivergedFilter { reason, .. } => Error::DivergedFilter { step: k, reason },
            other => other,
        })?;
        state = posterior;
        records.push(TraceRecord {
            k,
            t: k as f64 * cfg.dt,
            x_true: x_true.clone(),
            x_hat: state.x_hat.clone(),
            p_hat: state.p_hat.clone(),
            y,
            innovation,
        });
    }
    Ok(EstimateTrace {
        dt: cfg.dt,
        records,
    })
}

/// Lag-one sample autocorrelation of each innovation component.
pub fn innovation_lag1_autocorrelation(innovations: &[DVector<f64>]) -> Result<Vec<f64>> {
    if innovations.len() < 3 {
        return Err(Error::InsufficientData(
            "autocorrelation needs at least 3 innovations".into(),
        ));
    }
    let m = innovations[0].len();
    let n = innovations.len() as f64;
    Ok((0..m)
        .map(|j| {
            let mean = innovations.iter().map(|z| z[j]).sum::<f64>() / n;
            let var: f64 = innovations.iter().map(|z| (z[j] - mean).powi(2)).sum();
            let cov: f64 = innovations
                .windows(2)
                .map(|w| (w[0][j] - mean) * (w[1][j] - mean))
                .sum();
            if var > 0.0 {
                cov / var
            } else {
                0.0
            }
        })
        .collect())
}
