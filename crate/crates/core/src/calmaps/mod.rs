//! Calibration maps from an estimator's covariance `P̂` (and optionally its
//! state `x̂`) to a corrected covariance: a global scalar, a global
//! congruence `A P̂ Aᵀ`, and feedforward networks producing `Q Qᵀ`.

mod matrix;
mod mlp;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::statmath::{packed_len, CovMatrix};

pub use matrix::{fit_matrix, matrix_objective, MatrixFit, MatrixFitOptions};
pub use mlp::{
    mlp_loss, mlp_loss_and_gradient, train_mlp, Adam, DenseLayer, InputSpec, MlpGradient, MlpMap,
    MlpPreset, Normalizer, OutputForm, TrainOptions, TrainReport,
};

/// One `(P̂, x̂) → P` pair with the sequence and step it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub p_hat: CovMatrix,
    pub x_hat: Option<Vec<f64>>,
    pub p_target: CovMatrix,
    pub sequence: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    dim: usize,
    samples: Vec<TrainingSample>,
}

impl TrainingSet {
    pub fn new(samples: Vec<TrainingSample>) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyInput("training set"))?;
        let dim = first.p_hat.dim();
        let has_state = first.x_hat.is_some();
        for s in &samples {
            if s.p_hat.dim() != dim || s.p_target.dim() != dim {
                return Err(Error::invalid("training covariances differ in dimension"));
            }
            if s.x_hat.is_some() != has_state || s.x_hat.as_ref().is_some_and(|x| x.len() != dim) {
                return Err(Error::invalid(
                    "state vectors must be given for every sample with the covariance dimension",
                ));
            }
            if !s.p_hat.is_finite() || !s.p_target.is_finite() {
                return Err(Error::invalid(
                    "training covariances have non-finite entries",
                ));
            }
            s.p_target.check_psd()?;
        }
        Ok(Self { dim, samples })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[TrainingSample] {
        &self.samples
    }

    pub fn has_state(&self) -> bool {
        self.samples[0].x_hat.is_some()
    }
}

/// Positive weights on the packed upper triangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dim: usize,
    pub upper: Vec<f64>,
}

impl LossWeights {
    pub fn new(dim: usize, upper: Vec<f64>) -> Result<Self> {
        if upper.len() != packed_len(dim) {
            return Err(Error::invalid("loss weights must cover the upper triangle"));
        }
        if upper.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("loss weights must be positive"));
        }
        Ok(Self { dim, upper })
    }

    pub fn uniform(dim: usize) -> Self {
        Self {
            dim,
            upper: vec![1.0; packed_len(dim)],
        }
    }

    pub fn diagonal_offdiagonal(dim: usize, diag: f64, off: f64) -> Self {
        let upper = (0..dim)
            .flat_map(|i| (i..dim).map(move |j| if i == j { diag } else { off }))
            .collect();
        Self { dim, upper }
    }

    /// 5 on the diagonal, 1 elsewhere.
    pub fn ekf2d() -> Self {
        Self::diagonal_offdiagonal(4, 5.0, 1.0)
    }

    /// 10 on the diagonal, 2.5 inside each 3×3 state block, 0.5 across blocks.
    pub fn vio() -> Self {
        let upper = (0..9)
            .flat_map(|i| {
                (i..9).map(move |j| {
                    if i == j {
                        10.0
                    } else if i / 3 == j / 3 {
                        2.5
                    } else {
                        0.5
                    }
                })
            })
            .collect();
        Self { dim: 9, upper }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ekf2d" => Ok(Self::ekf2d()),
            "vio" => Ok(Self::vio()),
            other => Err(Error::invalid(format!(
                "unknown loss-weight preset {other:?}"
            ))),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            upper: self.upper.iter().map(|w| w * s).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarMap {
    pub s: f64,
}

impl ScalarMap {
    pub fn new(s: f64) -> Result<Self> {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(Error::invalid("scalar map must be finite and nonnegative"));
        }
        Ok(Self { s })
    }

    pub fn apply(&self, p_hat: &CovMatrix) -> CovMatrix {
        p_hat.scaled(self.s)
    }
}

/// `s = max(0, Σ⟨P̂, P⟩ / Σ⟨P̂, P̂⟩)` over upper-triangle entries, the exact
/// minimizer of `Σ (s P̂ⁱʲ − Pⁱʲ)²` subject to `s ≥ 0`.
pub fn fit_scalar(ts: &TrainingSet) -> Result<ScalarMap> {
    let (mut num, mut den) = (0.0, 0.0);
    for s in ts.samples() {
        for (a, b) in s.p_hat.upper().iter().zip(s.p_target.upper()) {
            num += a * b;
            den += a * a;
        }
    }
    if !(den > 0.0) {
        return Err(Error::DegenerateFit(
            "all estimated covariances are zero".into(),
        ));
    }
    ScalarMap::new((num / den).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixMap {
    pub a: DMatrix<f64>,
}

impl MatrixMap {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("matrix map must be square and finite"));
        }
        Ok(Self { a })
    }

    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        Self {
            a: DMatrix::identity(dim, dim) * s,
        }
    }

    pub fn apply(&self, p_hat: &CovMatrix) -> Result<CovMatrix> {
        p_hat.congruence(&self.a)
    }
}

/// `100 (D_unadj − D_method) / (D_unadj − D_gt)`.
pub fn percent_decrease(d_unadj: f64, d_method: f64, d_gt: f64) -> Result<f64> {
    if d_unadj == d_gt {
        return Err(Error::UndefinedBaseline(d_gt));
    }
    Ok(100.0 * (d_unadj - d_method) / (d_unadj - d_gt))
}

pub const MAP_FORMAT: &str = "covcal-map";
pub const MAP_VERSION: u32 = 1;

/// Any fitted map, serialized with a kind tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationMap {
    Identity { dim: usize },
    Scalar(ScalarMap),
    Matrix(MatrixMap),
    Mlp(MlpMap),
}

#[derive(Serialize, Deserialize)]
struct MapFile {
    format: String,
    version: u32,
    map: CalibrationMap,
}

impl CalibrationMap {
    pub fn name(&self) -> &'static str {
        match self {
            CalibrationMap::Identity { .. } => "identity",
            CalibrationMap::Scalar(_) => "scalar",
            CalibrationMap::Matrix(_) => "matrix",
            CalibrationMap::Mlp(_) => "mlp",
        }
    }

    /// State dimension the map is built for; a scalar map fits any.
    pub fn dim(&self) -> Option<usize> {
        match self {
            CalibrationMap::Identity { dim } => Some(*dim),
            CalibrationMap::Scalar(_) => None,
            CalibrationMap::Matrix(m) => Some(m.a.nrows()),
            CalibrationMap::Mlp(m) => Some(m.dim),
        }
    }

    pub fn needs_state(&self) -> bool {
        matches!(self, CalibrationMap::Mlp(m) if m.input == InputSpec::StateAndCovariance)
    }

    pub fn apply(&self, p_hat: &CovMatrix, x_hat: Option<&DVector<f64>>) -> Result<CovMatrix> {
        match self {
            CalibrationMap::Identity { .. } => Ok(p_hat.clone()),
            CalibrationMap::Scalar(m) => Ok(m.apply(p_hat)),
            CalibrationMap::Matrix(m) => m.apply(p_hat),
            CalibrationMap::Mlp(m) => m.forward(p_hat, x_hat),
        }
    }

    /// Applies the map to many inputs; networks evaluate them in batches.
    pub fn apply_all(
        &self,
        p_hat: &[CovMatrix],
        x_hat: Option<&[DVector<f64>]>,
    ) -> Result<Vec<CovMatrix>> {
        if let Some(x) = x_hat {
            if x.len() != p_hat.len() {
                return Err(Error::invalid("one state is required per covariance"));
            }
        }
        match self {
            CalibrationMap::Mlp(m) => m.forward_all(p_hat, x_hat),
            _ => p_hat
                .iter()
                .enumerate()
                .map(|(i, p)| self.apply(p, x_hat.map(|x| &x[i])))
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MapFile {
            format: MAP_FORMAT.into(),
            version: MAP_VERSION,
            map: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MapFile = serde_json::from_str(text)?;
        if file.format != MAP_FORMAT {
            return Err(Error::invalid(format!(
                "not a calibration map file (format {:?})",
                file.format
            )));
        }
        if file.version != MAP_VERSION {
            return Err(Error::invalid(format!(
                "unsupported map version {}",
                file.version
            )));
        }
        if let CalibrationMap::Mlp(m) = &file.map {
            m.validate()?;
        }
        Ok(file.map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> CovMatrix {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        CovMatrix::from_full(&(&m * m.transpose() + DMatrix::identity(n, n) * 0.1)).unwrap()
    }

    pub(crate) fn set_from(pairs: Vec<(CovMatrix, CovMatrix)>) -> TrainingSet {
        TrainingSet::new(
            pairs
                .into_iter()
                .enumerate()
                .map(|(k, (p_hat, p_target))| TrainingSample {
                    p_hat,
                    x_hat: None,
                    p_target,
                    sequence: 0,
                    step: k,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn scalar_exact_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<_> = (0..20).map(|_| random_pd(&mut rng, 3)).collect();
        let twice = set_from(p.iter().map(|p| (p.clone(), p.scaled(2.0))).collect());
        assert!((fit_scalar(&twice).unwrap().s - 2.0).abs() < 1e-14);
        let same = set_from(p.iter().map(|p| (p.clone(), p.clone())).collect());
        assert!((fit_scalar(&same).unwrap().s - 1.0).abs() < 1e-14);
    }

    #[test]
    fn scalar_clamps_and_rejects_zero() {
        let zero = set_from(vec![(CovMatrix::zeros(2), CovMatrix::identity(2))]);
        assert!(matches!(fit_scalar(&zero), Err(Error::DegenerateFit(_))));
        // anti-correlated off-diagonals pull the unconstrained optimum below 0
        let p_hat = CovMatrix::from_upper(2, vec![1e-3, 1.0, 1e-3]).unwrap();
        let target = CovMatrix::from_upper(2, vec![1.0, -1.0, 1.0]).unwrap();
        let ts = TrainingSet::new(vec![TrainingSample {
            p_hat,
            x_hat: None,
            p_target: target,
            sequence: 0,
            step: 0,
        }]);
        assert!(ts.is_ok());
        assert_eq!(fit_scalar(&ts.unwrap()).unwrap().s, 0.0);
    }

    fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn scalar_matches_numeric_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let pairs: Vec<_> = (0..30)
                .map(|_| (random_pd(&mut rng, 4), random_pd(&mut rng, 4)))
                .collect();
            let ts = set_from(pairs);
            let obj = |s: f64| {
                ts.samples()
                    .iter()
                    .flat_map(|x| {
                        x.p_hat
                            .upper()
                            .iter()
                            .zip(x.p_target.upper())
                            .map(move |(a, b)| (s * a - b).powi(2))
                    })
                    .sum::<f64>()
            };
            let numeric = golden_section(obj, 0.0, 10.0);
            assert!((fit_scalar(&ts).unwrap().s - numeric).abs() < 1e-6);
        }
    }

    #[test]
    fn percent_decrease_values() {
        assert!((percent_decrease(0.3394, 0.2902, 0.1839).unwrap() - 31.6).abs() < 0.05);
        assert!((percent_decrease(0.2697, 0.0987, 0.1103).unwrap() - 107.3).abs() < 0.05);
        assert_eq!(percent_decrease(0.3, 0.3, 0.1).unwrap(), 0.0);
        assert!(matches!(
            percent_decrease(0.2, 0.1, 0.2),
            Err(Error::UndefinedBaseline(_))
        ));
    }

    #[test]
    fn weight_presets() {
        let e = LossWeights::ekf2d();
        assert_eq!(
            e.upper,
            vec![5.0, 1.0, 1.0, 1.0, 5.0, 1.0, 1.0, 5.0, 1.0, 5.0]
        );
        let v = LossWeights::vio();
        assert_eq!(v.upper.len(), 45);
        assert_eq!(v.upper[0], 10.0);
        assert_eq!(v.upper[1], 2.5);
        assert_eq!(v.upper[3], 0.5);
        assert!(LossWeights::new(2, vec![1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn maps_output_psd_over_random_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scalar = CalibrationMap::Scalar(ScalarMap::new(1.7).unwrap());
        let matrix = CalibrationMap::Matrix(
            MatrixMap::new(DMatrix::from_fn(3, 3, |_, _| rng.random_range(-2.0..2.0))).unwrap(),
        );
        let mlp = CalibrationMap::Mlp(MlpMap::new(3, InputSpec::Covariance, &[8, 8], 5).unwrap());
        for _ in 0..10_000 {
            let p = random_pd(&mut rng, 3);
            for m in [&scalar, &matrix, &mlp] {
                assert!(m.apply(&p, None).unwrap().is_psd(), "{}", m.name());
            }
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps = vec![
            CalibrationMap::Identity { dim: 2 },
            CalibrationMap::Scalar(ScalarMap::new(0.123_456_789_012_345_68).unwrap()),
            CalibrationMap::Matrix(
                MatrixMap::new(DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0))).unwrap(),
            ),
            CalibrationMap::Mlp(MlpMap::new(2, InputSpec::StateAndCovariance, &[4], 9).unwrap()),
        ];
        for m in maps {
            let back = CalibrationMap::from_json(&m.to_json().unwrap()).unwrap();
            assert_eq!(back, m);
        }
        assert!(CalibrationMap::from_json(
            r#"{"format":"other","version":1,"map":{"kind":"identity","dim":2}}"#
        )
        .is_err());
        assert!(CalibrationMap::from_json(
            r#"{"format":"covcal-map","version":9,"map":{"kind":"identity","dim":2}}"#
        )
        .is_err());
    }
}
