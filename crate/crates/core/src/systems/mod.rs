//! Benchmark systems: a linear spring-mass-damper and a Dubins car localized
//! by range and bearing to fixed beacons.

mod dubins;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::filters::{LinearModel, SimConfig};
use crate::statmath::CovMatrix;

pub use dubins::{
    dubins_config, dubins_model, generate_sequences, wrap_angle, DubinsBeaconModel, DubinsNoise,
    InputSequenceSpec, SequenceKind, DEFAULT_SEQUENCE_STEPS, DUBINS_BEACONS, DUBINS_DT,
    SEQUENCE_COUNT, SEQUENCE_FREQ_HZ, TEST_SEQUENCE,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpringMassParams {
    pub mass: f64,
    pub spring: f64,
    pub damping: f64,
    pub dt: f64,
    pub process_std: f64,
    pub measurement_std: f64,
}

impl Default for SpringMassParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            spring: 4.0,
            damping: 0.1,
            dt: 0.01,
            process_std: 0.003,
            measurement_std: 0.005,
        }
    }
}

impl SpringMassParams {
    /// `[[1, dt], [−(k/m) dt, 1 − (c/m) dt]]`
    pub fn transition(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            2,
            2,
            &[
                1.0,
                self.dt,
                -(self.spring / self.mass) * self.dt,
                1.0 - (self.damping / self.mass) * self.dt,
            ],
        )
    }

    pub fn model(&self) -> LinearModel {
        LinearModel {
            a: self.transition(),
            b: DMatrix::from_column_slice(2, 1, &[0.0, self.dt]),
            c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            // noise enters the velocity row, like the forcing input
            r: CovMatrix::from_diagonal(&[0.0, self.process_std * self.process_std]),
            q: CovMatrix::from_diagonal(&[self.measurement_std * self.measurement_std]),
        }
    }
}

pub fn spring_mass_model() -> LinearModel {
    SpringMassParams::default().model()
}

/// `u_k = sin(π t_k / 2)` with `t_k = k dt`.
pub fn spring_mass_input(steps: usize, dt: f64) -> Vec<Vec<f64>> {
    (0..steps)
        .map(|k| vec![(std::f64::consts::FRAC_PI_2 * k as f64 * dt).sin()])
        .collect()
}

/// Spring-mass run starting at rest, with the initial error drawn from `p0`.
pub fn spring_mass_config(seed: u64, steps: usize) -> SimConfig {
    let params = SpringMassParams::default();
    SimConfig {
        seed,
        steps,
        dt: params.dt,
        x0_true: vec![0.0, 0.0],
        x0_hat: vec![0.0, 0.0],
        p0: CovMatrix::from_diagonal(&[1e-4, 1e-4]),
        inputs: spring_mass_input(steps, params.dt),
        perturb_initial: true,
    }
}

/// Central finite-difference Jacobian, used to check analytic model Jacobians.
pub fn finite_difference_jacobian(
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    step: f64,
) -> DMatrix<f64> {
    let y0 = f(x);
    let mut jac = DMatrix::zeros(y0.len(), x.len());
    for j in 0..x.len() {
        let h = step * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        jac.set_column(j, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    jac
}
