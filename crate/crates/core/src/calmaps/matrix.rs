use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{MatrixMap, TrainingSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixFitOptions {
    pub max_iterations: usize,
    /// Stop once `‖∇‖ ≤ gradient_tolerance · ‖∇₀‖`.
    pub gradient_tolerance: f64,
    /// Stop once a step lowers the objective by less than this fraction.
    pub objective_tolerance: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for MatrixFitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 20_000,
            gradient_tolerance: 1e-8,
            objective_tolerance: 1e-13,
            armijo: 1e-4,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixFit {
    pub map: MatrixMap,
    pub initial_objective: f64,
    pub objective: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

/// Training pairs as dense row-major `n × n` blocks.
struct Dense {
    n: usize,
    p_hat: Vec<f64>,
    target: Vec<f64>,
}

impl Dense {
    fn new(ts: &TrainingSet) -> Self {
        let n = ts.dim();
        let mut p_hat = Vec::with_capacity(ts.len() * n * n);
        let mut target = Vec::with_capacity(ts.len() * n * n);
        for s in ts.samples() {
            for i in 0..n {
                for j in 0..n {
                    p_hat.push(s.p_hat.get(i, j));
                    target.push(s.p_target.get(i, j));
                }
            }
        }
        Self { n, p_hat, target }
    }

    /// `Σ_samples Σ_{i≤j} ((A P̂ Aᵀ − P)ⁱʲ)²` and, into `grad`, its gradient
    /// `Σ S A P̂` where `S = 2E` off the diagonal and `4E` on it.
    fn evaluate(&self, a: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let n = self.n;
        let nn = n * n;
        let mut ap = vec![0.0; nn];
        let mut e = vec![0.0; nn];
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut obj = 0.0;
        for (p, t) in self
            .p_hat
            .chunks_exact(nn)
            .zip(self.target.chunks_exact(nn))
        {
            for i in 0..n {
                for j in 0..n {
                    ap[i * n + j] = (0..n).map(|k| a[i * n + k] * p[k * n + j]).sum();
                }
            }
            for i in 0..n {
                for j in i..n {
                    let m: f64 = (0..n).map(|k| ap[i * n + k] * a[j * n + k]).sum();
                    let d = m - t[i * n + j];
                    obj += d * d;
                    e[i * n + j] = if i == j { 4.0 * d } else { 2.0 * d };
                    e[j * n + i] = e[i * n + j];
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                for i in 0..n {
                    for j in 0..n {
                        g[i * n + j] += (0..n).map(|k| e[i * n + k] * ap[k * n + j]).sum::<f64>();
                    }
                }
            }
        }
        obj
    }
}

fn to_flat(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    (0..n * n).map(|i| a[(i / n, i % n)]).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn matrix_objective(ts: &TrainingSet, map: &MatrixMap) -> f64 {
    Dense::new(ts).evaluate(&to_flat(&map.a), None)
}

/// Local minimizer of the congruence objective by gradient descent with
/// Barzilai-Borwein step lengths and Armijo backtracking. Every accepted step
/// decreases the objective.
pub fn fit_matrix(
    ts: &TrainingSet,
    init: &MatrixMap,
    opts: &MatrixFitOptions,
) -> Result<MatrixFit> {
    let n = ts.dim();
    if init.a.nrows() != n || !init.a.is_square() {
        return Err(Error::invalid(format!("initial matrix must be {n}x{n}")));
    }
    if init.a.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial matrix has non-finite entries"));
    }
    let data = Dense::new(ts);
    let mut a = to_flat(&init.a);
    let mut grad = vec![0.0; n * n];
    let mut obj = data.evaluate(&a, Some(&mut grad));
    let initial_objective = obj;
    let g0 = norm(&grad);
    let mut history = vec![obj];
    let mut step = 1.0 / g0.max(1e-300);
    let mut iterations = 0;
    let mut converged = norm(&grad) <= opts.gradient_tolerance * g0;
    let mut next_grad = vec![0.0; n * n];

    while !converged && iterations < opts.max_iterations {
        let g2 = norm(&grad).powi(2);
        let mut t = step;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let candidate: Vec<f64> = a.iter().zip(&grad).map(|(x, g)| x - t * g).collect();
            let c_obj = data.evaluate(&candidate, None);
            if c_obj.is_finite() && c_obj <= obj - opts.armijo * t * g2 {
                accepted = Some((candidate, c_obj));
                break;
            }
            t *= 0.5;
        }
        let Some((next, next_obj)) = accepted else {
            if iterations == 0 {
                return Err(Error::OptimizerStalled {
                    iteration: 0,
                    objective: obj,
                });
            }
            log::debug!("matrix fit: line search exhausted after {iterations} iterations");
            break;
        };
        data.evaluate(&next, Some(&mut next_grad));
        let (mut sy, mut yy) = (0.0, 0.0);
        for i in 0..a.len() {
            let s = next[i] - a[i];
            let y = next_grad[i] - grad[i];
            sy += s * y;
            yy += y * y;
        }
        // BB2 step when curvature is positive, otherwise grow the last one
        step = if sy > 0.0 { sy / yy } else { 2.0 * t };
        let decrease = obj - next_obj;
        a = next;
        obj = next_obj;
        std::mem::swap(&mut grad, &mut next_grad);
        history.push(obj);
        iterations += 1;
        converged = norm(&grad) <= opts.gradient_tolerance * g0
            || decrease <= opts.objective_tolerance * obj.max(f64::MIN_POSITIVE);
    }
    let gradient_norm = norm(&grad);
    Ok(MatrixFit {
        map: MatrixMap::new(DMatrix::from_row_slice(n, n, &a))?,
        initial_objective,
        objective: obj,
        iterations,
        gradient_norm,
        converged,
        history,
    })
}
