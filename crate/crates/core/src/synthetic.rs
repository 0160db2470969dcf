//! Synthetic error processes with known, slowly varying covariance.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use nalgebra::{UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::groundtruth::{DiffRule, StateBlock};
use crate::statmath::{eig_symmetric, CovMatrix};
use crate::trace::{TraceFile, TraceHeader, TraceRow};

/// Per-component standard deviations of a 9-state pose/velocity estimator:
/// translation (m), rotation (rad), velocity (m/s).
pub const VIO_LIKE_STD: [f64; 9] = [0.05, 0.05, 0.05, 0.01, 0.01, 0.01, 0.02, 0.02, 0.02];

/// `Σ(k) = D(k) C D(k)` with `C_ij = ρ^|i−j|` and
/// `D(k)_ii = stdᵢ (1 + a sin(2πk/T + i))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowlyVaryingCov {
    pub std: Vec<f64>,
    pub correlation: f64,
    pub amplitude: f64,
    pub period: f64,
}

impl SlowlyVaryingCov {
    pub fn new(std: Vec<f64>, correlation: f64, amplitude: f64, period: f64) -> Result<Self> {
        if std.is_empty() || std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("standard deviations must be positive"));
        }
        if !(correlation.abs() < 1.0) || !(0.0..1.0).contains(&amplitude) || !(period > 0.0) {
            return Err(Error::invalid(
                "need |ρ| < 1, 0 ≤ a < 1 and a positive period",
            ));
        }
        Ok(Self {
            std,
            correlation,
            amplitude,
            period,
        })
    }

    pub fn vio_like(period: f64) -> Self {
        Self {
            std: VIO_LIKE_STD.to_vec(),
            correlation: 0.5,
            amplitude: 0.5,
            period,
        }
    }

    pub fn dim(&self) -> usize {
        self.std.len()
    }

    fn correlation_factor(&self) -> DMatrix<f64> {
        let n = self.dim();
        let c = DMatrix::from_fn(n, n, |i, j| {
            self.correlation.powi((i as i32 - j as i32).abs())
        });
        c.cholesky()
            .expect("AR(1) correlation is positive definite")
            .l()
    }

    fn scales(&self, k: usize) -> DVector<f64> {
        let phase = 2.0 * std::f64::consts::PI * k as f64 / self.period;
        DVector::from_fn(self.dim(), |i, _| {
            self.std[i] * (1.0 + self.amplitude * (phase + i as f64).sin())
        })
    }

    pub fn sigma(&self, k: usize) -> CovMatrix {
        let l = DMatrix::from_diagonal(&self.scales(k)) * self.correlation_factor();
        CovMatrix::from_full(&(&l * l.transpose())).expect("square")
    }

    /// Independent draws `eₖ ~ N(0, Σ(k))` for `k = 0 … len − 1`.
    pub fn sample(&self, len: usize, seed: u64) -> Vec<DVector<f64>> {
        self.sample_from(0, len, seed)
    }

    /// Same as [`sample`](Self::sample) for `k = start … start + len − 1`.
    pub fn sample_from(&self, start: usize, len: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lc = self.correlation_factor();
        (start..start + len)
            .map(|k| {
                let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(&mut rng));
                (&lc * z).component_mul(&self.scales(k))
            })
            .collect()
    }
}

/// A 9-state pose/velocity estimator whose errors follow [`SlowlyVaryingCov`]
/// but which reports `P̂ = g·D (D⁻¹ Σ D⁻¹)^γ D`, with `D` the nominal
/// standard deviations. The distortion is nonlinear in `Σ` and independent of
/// the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiscalibratedVio {
    pub truth: SlowlyVaryingCov,
    pub gamma: f64,
    pub gain: f64,
    pub dt: f64,
}

impl Default for MiscalibratedVio {
    fn default() -> Self {
        let truth = SlowlyVaryingCov {
            correlation: 0.2,
            ..SlowlyVaryingCov::vio_like(3000.0)
        };
        Self {
            truth,
            gamma: 1.5,
            gain: 0.3,
            dt: 0.05,
        }
    }
}

impl MiscalibratedVio {
    pub fn blocks() -> Vec<StateBlock> {
        vec![
            StateBlock::new("position", 0, 3, DiffRule::Euclidean),
            StateBlock::new("orientation", 3, 3, DiffRule::RotationVector),
            StateBlock::new("velocity", 6, 3, DiffRule::Euclidean),
        ]
    }

    pub fn reported(&self, sigma: &CovMatrix) -> Result<CovMatrix> {
        let d = DVector::from_column_slice(&self.truth.std);
        let dinv = d.map(|v| 1.0 / v);
        let normalized = sigma.congruence(&DMatrix::from_diagonal(&dinv))?;
        let eig = eig_symmetric(&normalized)?;
        let lam = eig.eigenvalues.map(|l| l.max(0.0).powf(self.gamma));
        let u = &eig.eigenvectors;
        let powered = CovMatrix::from_full(&(u * DMatrix::from_diagonal(&lam) * u.transpose()))?;
        Ok(powered
            .congruence(&DMatrix::from_diagonal(&d))?
            .scaled(self.gain))
    }

    /// Estimated state at step `k` along a circuit whose radius, rate and
    /// phase are drawn from `seed`, so the state says nothing about `Σ(k)`.
    fn nominal(&self, k: usize, path: &[f64; 3]) -> DVector<f64> {
        let [r, w, phase] = *path;
        let t = k as f64 * self.dt;
        let (s, c) = (w * t + phase).sin_cos();
        DVector::from_column_slice(&[
            r * c,
            r * s,
            0.5 * (0.5 * w * t).sin(),
            0.05 * (0.3 * t + phase).sin(),
            0.05 * (0.2 * t).cos(),
            0.5 * (w * t + phase).sin(),
            -r * w * s,
            r * w * c,
            0.25 * w * (0.5 * w * t).cos(),
        ])
    }

    /// Steps `start … start + len − 1` with `x_true = x̂ ⊞ e`, `e ~ N(0, Σ(k))`.
    pub fn trace(&self, start: usize, len: usize, seed: u64) -> Result<TraceFile> {
        if self.truth.dim() != 9 {
            return Err(Error::invalid("the synthetic estimator has 9 states"));
        }
        let errors = self.truth.sample_from(start, len, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let path = [
            rng.random_range(2.0..4.0),
            rng.random_range(0.1..0.3),
            rng.random_range(0.0..std::f64::consts::TAU),
        ];
        let rows = errors
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let k = start + i;
                let x_hat = self.nominal(k, &path);
                let mut x_true = &x_hat + e;
                let r_hat =
                    UnitQuaternion::from_scaled_axis(Vector3::new(x_hat[3], x_hat[4], x_hat[5]));
                let r_true =
                    UnitQuaternion::from_scaled_axis(Vector3::new(e[3], e[4], e[5])) * r_hat;
                x_true.rows_mut(3, 3).copy_from(&r_true.scaled_axis());
                let p_hat = self.reported(&self.truth.sigma(k))?;
                Ok(TraceRow {
                    k,
                    t: k as f64 * self.dt,
                    x_true: x_true.as_slice().to_vec(),
                    x_hat: x_hat.as_slice().to_vec(),
                    p_hat: p_hat.into_upper(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut header = TraceHeader::new(9, 0, self.dt);
        header.blocks = Self::blocks();
        header.system = Some("synthetic-vio".into());
        header.seed = Some(seed);
        TraceFile::new(header, rows)
    }
}
