//! Python bindings: traces, calibration maps, evaluation and fitting.
//!
//! Matrices cross the boundary as nested lists, reports as plain dicts.

use std::path::PathBuf;

use covcal_core::calmaps::{
    fit_matrix, fit_scalar, train_mlp, CalibrationMap, InputSpec, LossWeights, MatrixFitOptions,
    MatrixMap, MlpPreset, TrainOptions,
};
use covcal_core::filters::simulate;
use covcal_core::groundtruth::{horn_align, window_search};
use covcal_core::report::{self, EvaluateOptions, GroundTruthMode, Protocol};
use covcal_core::statmath::{self, Binning, CovMatrix, NeesSeries};
use covcal_core::synthetic::MiscalibratedVio;
use covcal_core::systems::{spring_mass_config, spring_mass_model};
use covcal_core::trace::TraceFile;
use nalgebra::{DMatrix, DVector, Vector3};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(covcal, CovcalError, PyException, "Invalid input or data.");
create_exception!(
    covcal,
    NumericalError,
    CovcalError,
    "A numerical failure such as a singular covariance."
);

fn err(e: covcal_core::Error) -> PyErr {
    if e.is_numerical() {
        NumericalError::new_err(e.to_string())
    } else {
        CovcalError::new_err(e.to_string())
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for covcal_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn to_cov(rows: Vec<Vec<f64>>) -> PyResult<CovMatrix> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(CovcalError::new_err(
            "covariance must be a square list of lists",
        ));
    }
    CovMatrix::from_full(&DMatrix::from_fn(n, n, |i, j| rows[i][j])).py()
}

fn from_cov(p: &CovMatrix) -> Vec<Vec<f64>> {
    let n = p.dim();
    (0..n)
        .map(|i| (0..n).map(|j| p.get(i, j)).collect())
        .collect()
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn ground_truth(gt: &str) -> PyResult<GroundTruthMode> {
    gt.parse().py()
}

fn binning(bins: Option<usize>) -> Binning {
    bins.map_or(Binning::SqrtN, Binning::Count)
}

/// An estimator log: truth, estimate and reported covariance per step.
#[pyclass(name = "TraceFile", module = "covcal", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTrace {
    inner: TraceFile,
}

#[pymethods]
impl PyTrace {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TraceFile::load(&path).py()?,
        })
    }

    /// CSV with a `#` JSON header line, or JSON lines.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TraceFile::parse(text).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    fn to_csv(&self) -> PyResult<String> {
        self.inner.to_csv().py()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn header(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        json_to_py(
            py,
            &serde_json::to_string(&self.inner.header).map_err(|e| err(e.into()))?,
        )
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.rows.iter().map(|r| r.t).collect()
    }

    #[getter]
    fn x_true(&self) -> Vec<Vec<f64>> {
        self.inner.rows.iter().map(|r| r.x_true.clone()).collect()
    }

    #[getter]
    fn x_hat(&self) -> Vec<Vec<f64>> {
        self.inner.rows.iter().map(|r| r.x_hat.clone()).collect()
    }

    /// Errors under the header's block difference rules.
    fn errors(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(self
            .inner
            .errors()
            .py()?
            .errors()
            .iter()
            .map(|e| e.as_slice().to_vec())
            .collect())
    }

    fn covariances(&self) -> PyResult<Vec<Vec<Vec<f64>>>> {
        Ok(self
            .inner
            .covariances()
            .py()?
            .iter()
            .map(from_cov)
            .collect())
    }

    fn nees(&self) -> PyResult<Vec<f64>> {
        let errors = self.inner.errors().py()?;
        let covs = self.inner.covariances().py()?;
        errors
            .errors()
            .iter()
            .zip(&covs)
            .map(|(e, p)| statmath::nees_regularized(e, p).py())
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "TraceFile(n={}, rows={})",
            self.inner.dim(),
            self.inner.len()
        )
    }
}

/// A fitted map from reported to calibrated covariances.
#[pyclass(
    name = "CalibrationMap",
    module = "covcal",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
struct PyMap {
    inner: CalibrationMap,
}

#[pymethods]
impl PyMap {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CalibrationMap::load(&path).py()?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CalibrationMap::from_json(text).py()?,
        })
    }

    #[staticmethod]
    fn scalar(s: f64) -> PyResult<Self> {
        Ok(Self {
            inner: CalibrationMap::Scalar(covcal_core::calmaps::ScalarMap::new(s).py()?),
        })
    }

    #[staticmethod]
    fn matrix(a: Vec<Vec<f64>>) -> PyResult<Self> {
        let n = a.len();
        if a.iter().any(|r| r.len() != n) {
            return Err(CovcalError::new_err("matrix must be square"));
        }
        let m = MatrixMap::new(DMatrix::from_fn(n, n, |i, j| a[i][j])).py()?;
        Ok(Self {
            inner: CalibrationMap::Matrix(m),
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().py()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.name()
    }

    #[getter]
    fn needs_state(&self) -> bool {
        self.inner.needs_state()
    }

    #[pyo3(signature = (p_hat, x_hat=None))]
    fn apply(&self, p_hat: Vec<Vec<f64>>, x_hat: Option<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = x_hat.map(DVector::from_vec);
        Ok(from_cov(
            &self.inner.apply(&to_cov(p_hat)?, x.as_ref()).py()?,
        ))
    }

    /// Trace with every covariance replaced by the map's output.
    fn apply_trace(&self, trace: &PyTrace) -> PyResult<PyTrace> {
        Ok(PyTrace {
            inner: report::apply_map(&self.inner, &trace.inner).py()?,
        })
    }

    fn __repr__(&self) -> String {
        format!("CalibrationMap(kind={:?})", self.inner.name())
    }
}

fn traces_of(traces: &[PyRef<'_, PyTrace>]) -> Vec<TraceFile> {
    traces.iter().map(|t| t.inner.clone()).collect()
}

/// Report table as a dict. `gt` is "mc", "ergodic:K" or "none".
#[pyfunction]
#[pyo3(signature = (traces, gt="none", per_sequence=false, groups=50, group_size=200, bins=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    traces: Vec<PyRef<'_, PyTrace>>,
    gt: &str,
    per_sequence: bool,
    groups: usize,
    group_size: usize,
    bins: Option<usize>,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let protocol = if per_sequence {
        Protocol::PerSequence
    } else {
        Protocol::Resampled { groups, group_size }
    };
    let opts = EvaluateOptions {
        ground_truth: ground_truth(gt)?,
        binning: binning(bins),
        protocol,
        seed,
    };
    let traces = traces_of(&traces);
    let ev = py.detach(|| report::evaluate(&traces, &opts)).py()?;
    json_to_py(
        py,
        &serde_json::to_string(&ev.report).map_err(|e| err(e.into()))?,
    )
}

/// Fits `method` ("scalar", "matrix", "mlp" or "mlp-state") to the ground
/// truth of `traces`. Networks take a preset name or default settings, with
/// `epochs` overriding either.
#[pyfunction]
#[pyo3(signature = (traces, method, gt, preset=None, epochs=None, seed=0))]
fn fit(
    py: Python<'_>,
    traces: Vec<PyRef<'_, PyTrace>>,
    method: &str,
    gt: &str,
    preset: Option<&str>,
    epochs: Option<usize>,
    seed: u64,
) -> PyResult<PyMap> {
    let traces = traces_of(&traces);
    let mode = ground_truth(gt)?;
    let preset = preset.map(MlpPreset::by_name).transpose().py()?;
    let method = method.to_string();
    let map = py.detach(move || -> covcal_core::Result<CalibrationMap> {
        let ts = report::training_set_from_traces(&traces, mode)?;
        match method.as_str() {
            "scalar" => Ok(CalibrationMap::Scalar(fit_scalar(&ts)?)),
            "matrix" => {
                let init = MatrixMap::scaled_identity(ts.dim(), fit_scalar(&ts)?.s.sqrt());
                Ok(CalibrationMap::Matrix(
                    fit_matrix(&ts, &init, &MatrixFitOptions::default())?.map,
                ))
            }
            "mlp" | "mlp-state" => {
                let input = if method == "mlp" {
                    InputSpec::Covariance
                } else {
                    InputSpec::StateAndCovariance
                };
                let (mut opts, weights) = match preset {
                    Some(p) => (
                        TrainOptions {
                            input,
                            ..p.options(seed)
                        },
                        p.loss_weights(),
                    ),
                    None => (
                        TrainOptions {
                            input,
                            seed,
                            ..TrainOptions::default()
                        },
                        LossWeights::uniform(ts.dim()),
                    ),
                };
                if let Some(e) = epochs {
                    opts.epochs = e;
                }
                Ok(CalibrationMap::Mlp(train_mlp(&ts, &opts, &weights)?.0))
            }
            other => Err(covcal_core::Error::InvalidInput(format!(
                "unknown method {other:?}"
            ))),
        }
    });
    Ok(PyMap { inner: map.py()? })
}

/// One spring-mass Kalman filter run.
#[pyfunction]
#[pyo3(signature = (steps=5000, seed=0))]
fn simulate_spring_mass(steps: usize, seed: u64) -> PyResult<PyTrace> {
    let model = spring_mass_model();
    let est = simulate(&model, &spring_mass_config(seed, steps)).py()?;
    Ok(PyTrace {
        inner: TraceFile::from_estimate(&est, 1).py()?,
    })
}

/// A 9-state trace whose reported covariance is a distorted power of the truth.
#[pyfunction]
#[pyo3(signature = (start=0, steps=2000, seed=0))]
fn synthetic_vio_trace(start: usize, steps: usize, seed: u64) -> PyResult<PyTrace> {
    Ok(PyTrace {
        inner: MiscalibratedVio::default().trace(start, steps, seed).py()?,
    })
}

#[pyfunction]
fn nees(error: Vec<f64>, p: Vec<Vec<f64>>) -> PyResult<f64> {
    statmath::nees(&DVector::from_vec(error), &to_cov(p)?).py()
}

/// Divergence between the histogram of `values` and the χ² density.
#[pyfunction]
#[pyo3(signature = (values, dof, bins=None))]
fn nees_divergence(values: Vec<f64>, dof: u32, bins: Option<usize>) -> PyResult<f64> {
    statmath::nees_divergence(&NeesSeries::new(values, dof).py()?, binning(bins)).py()
}

#[pyfunction]
fn chi2_pdf(x: f64, dof: u32) -> f64 {
    statmath::chi2_pdf(x, dof)
}

#[pyfunction]
fn chi2_quantile(p: f64, dof: u32) -> PyResult<f64> {
    statmath::chi2_quantile(p, dof).py()
}

/// `(R, t)` with `R·gt + t ≈ est` in the least-squares sense.
#[pyfunction]
fn align(gt: Vec<[f64; 3]>, est: Vec<[f64; 3]>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let v = |p: &[[f64; 3]]| p.iter().map(|x| Vector3::from(*x)).collect::<Vec<_>>();
    let tf = horn_align(&v(&gt), &v(&est)).py()?;
    let r = (0..3)
        .map(|i| (0..3).map(|j| tf.rotation[(i, j)]).collect())
        .collect();
    Ok((r, tf.translation.as_slice().to_vec()))
}

/// Best window and `(window, divergence)` pairs for the given odd windows.
#[pyfunction]
#[pyo3(signature = (traces, windows, bins=None))]
fn search_window(
    py: Python<'_>,
    traces: Vec<PyRef<'_, PyTrace>>,
    windows: Vec<usize>,
    bins: Option<usize>,
) -> PyResult<(usize, Vec<(usize, f64)>)> {
    let traces = traces_of(&traces);
    let s = py
        .detach(|| {
            let errors = traces
                .iter()
                .map(TraceFile::errors)
                .collect::<covcal_core::Result<Vec<_>>>()?;
            window_search(&errors, &windows, binning(bins))
        })
        .py()?;
    Ok((
        s.best_window,
        s.table.iter().map(|w| (w.window, w.divergence)).collect(),
    ))
}

#[pymodule]
fn covcal(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CovcalError", m.py().get_type::<CovcalError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<PyTrace>()?;
    m.add_class::<PyMap>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_spring_mass, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_vio_trace, m)?)?;
    m.add_function(wrap_pyfunction!(nees, m)?)?;
    m.add_function(wrap_pyfunction!(nees_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(chi2_pdf, m)?)?;
    m.add_function(wrap_pyfunction!(chi2_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(align, m)?)?;
    m.add_function(wrap_pyfunction!(search_window, m)?)?;
    Ok(())
}
