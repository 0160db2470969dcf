use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{SimConfig, SystemModel};
use crate::statmath::CovMatrix;

pub const DUBINS_DT: f64 = 0.1;
pub const DUBINS_BEACONS: [[f64; 2]; 4] = [[3.5, -1.1], [10.0, 10.0], [-5.0, 15.0], [-10.0, -8.2]];
pub const SEQUENCE_FREQ_HZ: f64 = 0.5;
/// 11 training sequences followed by one test sequence.
pub const SEQUENCE_COUNT: usize = 12;
pub const TEST_SEQUENCE: usize = SEQUENCE_COUNT - 1;

const MIN_RANGE: f64 = 1e-9;

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a - 2.0 * PI * ((a + PI) / (2.0 * PI)).floor();
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Process (`R`) and measurement (`Q`) noise of the Dubins benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DubinsNoise {
    pub process: CovMatrix,
    pub measurement: CovMatrix,
}

impl DubinsNoise {
    /// Per-beacon range and bearing standard deviations, stacked as
    /// `(r₁, φ₁, r₂, φ₂, …)`.
    pub fn new(process_diag: [f64; 4], range_std: f64, bearing_std: f64, beacons: usize) -> Self {
        let meas: Vec<f64> = (0..beacons)
            .flat_map(|_| [range_std * range_std, bearing_std * bearing_std])
            .collect();
        Self {
            process: CovMatrix::from_diagonal(&process_diag),
            measurement: CovMatrix::from_diagonal(&meas),
        }
    }
}

impl Default for DubinsNoise {
    fn default() -> Self {
        Self::new([1e-6, 1e-6, 1e-4, 1e-4], 0.05, 0.01, DUBINS_BEACONS.len())
    }
}

/// State `[x, y, v, θ]`, input `[a, ω]`, stacked range/bearing to each beacon.
#[derive(Debug, Clone, PartialEq)]
pub struct DubinsBeaconModel {
    pub beacons: Vec<[f64; 2]>,
    pub noise: DubinsNoise,
}

pub fn dubins_model(noise: DubinsNoise) -> Result<DubinsBeaconModel> {
    DubinsBeaconModel::new(DUBINS_BEACONS.to_vec(), noise)
}

impl DubinsBeaconModel {
    pub fn new(beacons: Vec<[f64; 2]>, noise: DubinsNoise) -> Result<Self> {
        if beacons.is_empty() {
            return Err(Error::invalid("at least one beacon is required"));
        }
        if noise.process.dim() != 4 || noise.measurement.dim() != 2 * beacons.len() {
            return Err(Error::invalid(
                "noise dimensions do not match the Dubins model",
            ));
        }
        noise.process.check_psd()?;
        noise.measurement.check_psd()?;
        Ok(Self { beacons, noise })
    }

    fn beacon_offsets(&self, x: &DVector<f64>) -> Result<Vec<(f64, f64, f64)>> {
        self.beacons
            .iter()
            .map(|b| {
                let (dx, dy) = (b[0] - x[0], b[1] - x[1]);
                let r2 = dx * dx + dy * dy;
                if r2.sqrt() < MIN_RANGE {
                    return Err(Error::SingularMeasurement(format!(
                        "vehicle at ({}, {}) coincides with beacon ({}, {})",
                        x[0], x[1], b[0], b[1]
                    )));
                }
                Ok((dx, dy, r2))
            })
            .collect()
    }
}

// Speed and heading are linear in time under zero-order-held inputs, so the
// RK4 stages reduce to Simpson's rule on the position integrands.
struct Stages {
    v: [f64; 3],
    c: [f64; 3],
    s: [f64; 3],
}

fn stages(x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> Stages {
    let (v0, th0, a, w) = (x[2], x[3], u[0], u[1]);
    let taus = [0.0, 0.5 * dt, dt];
    let v = taus.map(|t| v0 + a * t);
    let th = taus.map(|t| th0 + w * t);
    Stages {
        v,
        c: th.map(f64::cos),
        s: th.map(f64::sin),
    }
}

impl SystemModel for DubinsBeaconModel {
    fn state_dim(&self) -> usize {
        4
    }

    fn measurement_dim(&self) -> usize {
        2 * self.beacons.len()
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn propagate(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64> {
        let st = stages(x, u, dt);
        let k = dt / 6.0;
        DVector::from_vec(vec![
            x[0] + k * (st.v[0] * st.c[0] + 4.0 * st.v[1] * st.c[1] + st.v[2] * st.c[2]),
            x[1] + k * (st.v[0] * st.s[0] + 4.0 * st.v[1] * st.s[1] + st.v[2] * st.s[2]),
            x[2] + u[0] * dt,
            x[3] + u[1] * dt,
        ])
    }

    fn process_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DMatrix<f64> {
        let st = stages(x, u, dt);
        let k = dt / 6.0;
        let dx_dv = k * (st.c[0] + 4.0 * st.c[1] + st.c[2]);
        let dy_dv = k * (st.s[0] + 4.0 * st.s[1] + st.s[2]);
        let dx_dth = -k * (st.v[0] * st.s[0] + 4.0 * st.v[1] * st.s[1] + st.v[2] * st.s[2]);
        let dy_dth = k * (st.v[0] * st.c[0] + 4.0 * st.v[1] * st.c[1] + st.v[2] * st.c[2]);
        DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.0, dx_dv, dx_dth, //
                0.0, 1.0, dy_dv, dy_dth, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        )
    }

    fn measure(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let offsets = self.beacon_offsets(x)?;
        let mut y = DVector::zeros(self.measurement_dim());
        for (i, (dx, dy, r2)) in offsets.into_iter().enumerate() {
            y[2 * i] = r2.sqrt();
            y[2 * i + 1] = wrap_angle(dy.atan2(dx) - x[3]);
        }
        Ok(y)
    }

    fn measurement_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let offsets = self.beacon_offsets(x)?;
        let mut c = DMatrix::zeros(self.measurement_dim(), 4);
        for (i, (dx, dy, r2)) in offsets.into_iter().enumerate() {
            let r = r2.sqrt();
            c[(2 * i, 0)] = -dx / r;
            c[(2 * i, 1)] = -dy / r;
            c[(2 * i + 1, 0)] = dy / r2;
            c[(2 * i + 1, 1)] = -dx / r2;
            c[(2 * i + 1, 3)] = -1.0;
        }
        Ok(c)
    }

    fn process_noise(&self) -> &CovMatrix {
        &self.noise.process
    }

    fn measurement_noise(&self) -> &CovMatrix {
        &self.noise.measurement
    }

    fn measurement_residual(&self, y: &DVector<f64>, predicted: &DVector<f64>) -> DVector<f64> {
        let mut r = y - predicted;
        for i in 0..self.beacons.len() {
            r[2 * i + 1] = wrap_angle(r[2 * i + 1]);
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    /// `a_k = A sin(2π f t_k)`, `ω_k` constant.
    SinAccelConstOmega,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSequenceSpec {
    pub kind: SequenceKind,
    pub amplitude: f64,
    pub omega_const: f64,
    pub freq: f64,
    pub steps: usize,
    pub seed: u64,
}

impl InputSequenceSpec {
    /// `[a_k, ω_k]` for `k = 0 … steps − 1`.
    pub fn inputs(&self, dt: f64) -> Vec<Vec<f64>> {
        match self.kind {
            SequenceKind::SinAccelConstOmega => (0..self.steps)
                .map(|k| {
                    let t = k as f64 * dt;
                    vec![
                        self.amplitude * (2.0 * PI * self.freq * t).sin(),
                        self.omega_const,
                    ]
                })
                .collect(),
        }
    }
}

pub const DEFAULT_SEQUENCE_STEPS: usize = 600;
const AMPLITUDE_RANGE: (f64, f64) = (0.5, 2.0);
const OMEGA_RANGE: (f64, f64) = (-0.5, 0.5);

/// `count` input sequences with seeded amplitudes and turn rates. The last one
/// is the test sequence by convention.
pub fn generate_sequences(count: usize, steps: usize, seed: u64) -> Vec<InputSequenceSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let amplitude = rng.random_range(AMPLITUDE_RANGE.0..AMPLITUDE_RANGE.1);
            let omega_const = rng.random_range(OMEGA_RANGE.0..OMEGA_RANGE.1);
            InputSequenceSpec {
                kind: SequenceKind::SinAccelConstOmega,
                amplitude,
                omega_const,
                freq: SEQUENCE_FREQ_HZ,
                steps,
                seed,
            }
        })
        .collect()
}

/// Monte-Carlo run of one input sequence, starting at `(0, 0)` heading along
/// `x` at 1 m/s with the initial estimate error drawn from `p0`.
pub fn dubins_config(sequence: &InputSequenceSpec, run_seed: u64) -> SimConfig {
    SimConfig {
        seed: run_seed,
        steps: sequence.steps,
        dt: DUBINS_DT,
        x0_true: vec![0.0, 0.0, 1.0, 0.0],
        x0_hat: vec![0.0, 0.0, 1.0, 0.0],
        p0: CovMatrix::from_diagonal(&[0.01, 0.01, 0.01, 0.001]),
        inputs: sequence.inputs(DUBINS_DT),
        perturb_initial: true,
    }
}
