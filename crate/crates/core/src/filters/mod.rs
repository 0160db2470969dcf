//! Discrete-time Kalman filtering over a pluggable system model.
//!
//! The model follows `x_k = f(x_{k-1}, u_{k-1}) + ν_k`, `y_k = h(x_k) + w_k`
//! with `ν ~ N(0, R)` (process) and `w ~ N(0, Q)` (measurement). Note the
//! naming: `R` is the process noise and `Q` the measurement noise throughout.

mod sim;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::statmath::CovMatrix;

pub use sim::{
    innovation_lag1_autocorrelation, simulate, simulate_mismatched, EstimateTrace, SimConfig,
    TraceRecord,
};

/// Largest covariance trace accepted before the filter is declared diverged.
pub const MAX_COVARIANCE_TRACE: f64 = 1e12;

pub trait SystemModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn measurement_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// Deterministic process map `f(x, u)` over one step of length `dt`.
    fn propagate(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64>;
    /// `∂f/∂x` at `(x, u)`.
    fn process_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DMatrix<f64>;

    fn measure(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    /// `∂h/∂x` at `x`.
    fn measurement_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// `R`
    fn process_noise(&self) -> &CovMatrix;
    /// `Q`
    fn measurement_noise(&self) -> &CovMatrix;

    /// `y − ŷ`; models with angular measurements wrap the relevant components.
    fn measurement_residual(&self, y: &DVector<f64>, predicted: &DVector<f64>) -> DVector<f64> {
        y - predicted
    }
}

/// `x_k = A x_{k-1} + B u_{k-1}`, `y_k = C x_k`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub r: CovMatrix,
    pub q: CovMatrix,
}

impl LinearModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        r: CovMatrix,
        q: CovMatrix,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n
            || b.nrows() != n
            || c.ncols() != n
            || r.dim() != n
            || q.dim() != c.nrows()
        {
            return Err(Error::invalid("inconsistent linear model dimensions"));
        }
        r.check_psd()?;
        q.check_psd()?;
        Ok(Self { a, b, c, r, q })
    }
}

impl SystemModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn measurement_dim(&self) -> usize {
        self.c.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn propagate(&self, x: &DVector<f64>, u: &DVector<f64>, _dt: f64) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn process_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>, _dt: f64) -> DMatrix<f64> {
        self.a.clone()
    }

    fn measure(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.c * x)
    }

    fn measurement_jacobian(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.c.clone())
    }

    fn process_noise(&self) -> &CovMatrix {
        &self.r
    }

    fn measurement_noise(&self) -> &CovMatrix {
        &self.q
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x_hat: DVector<f64>,
    pub p_hat: CovMatrix,
    pub k: usize,
}

impl FilterState {
    pub fn new(x_hat: DVector<f64>, p_hat: CovMatrix) -> Result<Self> {
        if x_hat.len() != p_hat.dim() {
            return Err(Error::invalid("state and covariance dimensions differ"));
        }
        Ok(Self { x_hat, p_hat, k: 0 })
    }
}

fn check_health(x: &DVector<f64>, p: &CovMatrix, step: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) || !p.is_finite() {
        return Err(Error::DivergedFilter {
            step,
            reason: "non-finite state or covariance".into(),
        });
    }
    let trace = p.trace();
    if trace > MAX_COVARIANCE_TRACE {
        return Err(Error::DivergedFilter {
            step,
            reason: format!("covariance trace {trace:e} exceeds limit"),
        });
    }
    Ok(())
}

/// Time update: `x̂ ← f(x̂, u)`, `P̂ ← A P̂ Aᵀ + R` with `A` taken at the prior estimate.
pub fn ekf_predict(
    s: &FilterState,
    u: &DVector<f64>,
    model: &dyn SystemModel,
    dt: f64,
) -> Result<FilterState> {
    let a = model.process_jacobian(&s.x_hat, u, dt);
    let x_hat = model.propagate(&s.x_hat, u, dt);
    let mut p = s.p_hat.congruence(&a)?;
    p.add_scaled(model.process_noise(), 1.0);
    check_health(&x_hat, &p, s.k + 1)?;
    Ok(FilterState {
        x_hat,
        p_hat: p,
        k: s.k + 1,
    })
}

/// Measurement update in Joseph form. Returns the posterior and the innovation
/// `y − h(x̂_{k|k−1})`.
pub fn ekf_update(
    s: &FilterState,
    y: &DVector<f64>,
    model: &dyn SystemModel,
) -> Result<(FilterState, DVector<f64>)> {
    if y.len() != model.measurement_dim() {
        return Err(Error::invalid(format!(
            "measurement has length {}, model expects {}",
            y.len(),
            model.measurement_dim()
        )));
    }
    let c = model.measurement_jacobian(&s.x_hat)?;
    let innovation = model.measurement_residual(y, &model.measure(&s.x_hat)?);
    let p = s.p_hat.to_full();
    let q = model.measurement_noise().to_full();
    let pct = &p * c.transpose();
    let s_cov = &c * &pct + &q;
    let chol =
        Cholesky::new(0.5 * (&s_cov + s_cov.transpose())).ok_or(Error::SingularInnovation)?;
    // K = P Cᵀ S⁻¹, solved as S Kᵀ = C P
    let gain = chol.solve(&pct.transpose()).transpose();
    let x_hat = &s.x_hat + &gain * &innovation;
    let n = s.x_hat.len();
    let i_kc = DMatrix::<f64>::identity(n, n) - &gain * &c;
    let joseph = &i_kc * &p * i_kc.transpose() + &gain * q * gain.transpose();
    let p_hat = CovMatrix::from_full(&joseph)?;
    check_health(&x_hat, &p_hat, s.k)?;
    Ok((
        FilterState {
            x_hat,
            p_hat,
            k: s.k,
        },
        innovation,
    ))
}
