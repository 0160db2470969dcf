use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LossWeights, TrainingSample, TrainingSet};
use crate::error::{Error, Result};
use crate::statmath::{packed_len, CovMatrix};

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpec {
    /// Upper triangle of `P̂`.
    Covariance,
    /// `x̂` followed by the upper triangle of `P̂`.
    StateAndCovariance,
}

impl InputSpec {
    pub fn width(&self, dim: usize) -> usize {
        match self {
            InputSpec::Covariance => packed_len(dim),
            InputSpec::StateAndCovariance => dim + packed_len(dim),
        }
    }
}

/// How the linear output layer is read as the factor `Q` of `Q Qᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputForm {
    /// All `n²` entries, row-major.
    #[default]
    Square,
    /// Lower triangle row by row, with `softplus` on the diagonal. Keeps
    /// `det Q > 0`, so `Q Qᵀ` cannot pass through a singular matrix where a
    /// square factor would flip its orientation.
    Cholesky,
}

impl OutputForm {
    pub fn width(&self, dim: usize) -> usize {
        match self {
            OutputForm::Square => dim * dim,
            OutputForm::Cholesky => packed_len(dim),
        }
    }

    /// Row-major `n × n` factor from one raw output row.
    fn expand(&self, raw: &[f64], n: usize, q: &mut [f64]) {
        match self {
            OutputForm::Square => q.copy_from_slice(raw),
            OutputForm::Cholesky => {
                q.fill(0.0);
                let mut idx = 0;
                for i in 0..n {
                    for j in 0..=i {
                        q[i * n + j] = if i == j { softplus(raw[idx]) } else { raw[idx] };
                        idx += 1;
                    }
                }
            }
        }
    }

    /// Chain rule from `∂L/∂Q` to the raw outputs.
    fn pull_back(&self, raw: &[f64], n: usize, dq: &[f64], out: &mut [f64]) {
        match self {
            OutputForm::Square => out.copy_from_slice(dq),
            OutputForm::Cholesky => {
                let mut idx = 0;
                for i in 0..n {
                    for j in 0..=i {
                        out[idx] = if i == j {
                            dq[i * n + j] * sigmoid(raw[idx])
                        } else {
                            dq[i * n + j]
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y = W x + b` with `W` stored row-major as `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Per-feature affine standardization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Column means and standard deviations; constant columns keep unit scale.
    pub fn fit(rows: &[f64], width: usize) -> Self {
        let count = (rows.len() / width) as f64;
        let mut mean = vec![0.0; width];
        for row in rows.chunks_exact(width) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; width];
        for row in rows.chunks_exact(width) {
            for j in 0..width {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std = var
            .iter()
            .zip(&mean)
            .map(|(v, m)| {
                let s = (v / count).sqrt();
                if s > 1e-12 * m.abs().max(1e-300) {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    fn apply(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}

/// Feedforward network with ReLU hidden layers and a linear output read as a
/// matrix `Q` (see [`OutputForm`]); the map returns `D Q Qᵀ D` with a fixed
/// diagonal output scale `D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpMap {
    pub dim: usize,
    pub input: InputSpec,
    #[serde(default)]
    pub output: OutputForm,
    pub layers: Vec<DenseLayer>,
    pub input_norm: Normalizer,
    pub output_scale: Vec<f64>,
}

fn uniform_layer(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, limit: f64) -> DenseLayer {
    DenseLayer {
        inputs,
        outputs,
        weights: (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..limit))
            .collect(),
        biases: vec![0.0; outputs],
    }
}

impl MlpMap {
    /// He-uniform hidden layers, LeCun-uniform output layer, zero biases,
    /// square output factor.
    pub fn new(dim: usize, input: InputSpec, hidden: &[usize], seed: u64) -> Result<Self> {
        Self::with_output(dim, input, OutputForm::Square, hidden, seed)
    }

    pub fn with_output(
        dim: usize,
        input: InputSpec,
        output: OutputForm,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || hidden.contains(&0) {
            return Err(Error::invalid("network layers must be nonempty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_INIT);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = input.width(dim);
        for &h in hidden {
            layers.push(uniform_layer(
                &mut rng,
                width,
                h,
                (6.0 / width as f64).sqrt(),
            ));
            width = h;
        }
        layers.push(uniform_layer(
            &mut rng,
            width,
            output.width(dim),
            (3.0 / width as f64).sqrt(),
        ));
        Ok(Self {
            dim,
            input,
            output,
            layers,
            input_norm: Normalizer::identity(input.width(dim)),
            output_scale: vec![1.0; dim],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut width = self.input.width(self.dim);
        if self.input_norm.mean.len() != width || self.input_norm.std.len() != width {
            return Err(Error::invalid(
                "input normalization does not match the input width",
            ));
        }
        if self.output_scale.len() != self.dim {
            return Err(Error::invalid(
                "output scale does not match the covariance dimension",
            ));
        }
        if self.layers.is_empty() {
            return Err(Error::invalid("network has no layers"));
        }
        for l in &self.layers {
            if l.inputs != width
                || l.weights.len() != l.inputs * l.outputs
                || l.biases.len() != l.outputs
            {
                return Err(Error::invalid("network layer shapes are inconsistent"));
            }
            width = l.outputs;
        }
        if width != self.output.width(self.dim) {
            return Err(Error::invalid(format!(
                "network output must have {} entries",
                self.output.width(self.dim)
            )));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !self
            .layers
            .iter()
            .all(|l| finite(&l.weights) && finite(&l.biases))
            || !finite(&self.input_norm.mean)
            || !finite(&self.output_scale)
            || self.input_norm.std.iter().any(|s| !(*s > 0.0))
        {
            return Err(Error::invalid(
                "network parameters must be finite with positive scales",
            ));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.outputs)
            .collect()
    }

    fn raw_features(
        &self,
        p_hat: &CovMatrix,
        x_hat: Option<&[f64]>,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        if p_hat.dim() != self.dim {
            return Err(Error::invalid(format!(
                "expected a {0}x{0} covariance, got {1}x{1}",
                self.dim,
                p_hat.dim()
            )));
        }
        match (self.input, x_hat) {
            (InputSpec::Covariance, _) => {}
            (InputSpec::StateAndCovariance, Some(x)) if x.len() == self.dim => {
                out.extend_from_slice(x)
            }
            (InputSpec::StateAndCovariance, Some(x)) => {
                return Err(Error::invalid(format!(
                    "expected a state of length {}, got {}",
                    self.dim,
                    x.len()
                )))
            }
            (InputSpec::StateAndCovariance, None) => {
                return Err(Error::invalid(
                    "this network needs the state estimate as input",
                ))
            }
        }
        out.extend_from_slice(p_hat.upper());
        Ok(())
    }

    fn features(&self, p_hat: &CovMatrix, x_hat: Option<&[f64]>, out: &mut Vec<f64>) -> Result<()> {
        let start = out.len();
        self.raw_features(p_hat, x_hat, out)?;
        self.input_norm.apply(&mut out[start..]);
        Ok(())
    }

    fn q_to_cov(&self, raw: &[f64]) -> CovMatrix {
        let n = self.dim;
        let mut q = vec![0.0; n * n];
        self.output.expand(raw, n, &mut q);
        let d = &self.output_scale;
        let mut upper = Vec::with_capacity(packed_len(n));
        for i in 0..n {
            for j in i..n {
                let dot: f64 = (0..n).map(|k| q[i * n + k] * q[j * n + k]).sum();
                upper.push(d[i] * d[j] * dot);
            }
        }
        CovMatrix::from_upper(n, upper).expect("packed length")
    }

    pub fn forward(&self, p_hat: &CovMatrix, x_hat: Option<&DVector<f64>>) -> Result<CovMatrix> {
        let mut x = Vec::new();
        self.features(p_hat, x_hat.map(|v| v.as_slice()), &mut x)?;
        let out = self.run(&x, 1, None);
        Ok(self.q_to_cov(&out))
    }

    pub fn forward_all(
        &self,
        p_hat: &[CovMatrix],
        x_hat: Option<&[DVector<f64>]>,
    ) -> Result<Vec<CovMatrix>> {
        const CHUNK: usize = 1024;
        let width = self.input.width(self.dim);
        let mut result = Vec::with_capacity(p_hat.len());
        for (c, chunk) in p_hat.chunks(CHUNK).enumerate() {
            let mut x = Vec::with_capacity(chunk.len() * width);
            for (i, p) in chunk.iter().enumerate() {
                self.features(p, x_hat.map(|xs| xs[c * CHUNK + i].as_slice()), &mut x)?;
            }
            let out = self.run(&x, chunk.len(), None);
            result.extend(
                out.chunks_exact(self.output.width(self.dim))
                    .map(|q| self.q_to_cov(q)),
            );
        }
        Ok(result)
    }

    /// Forward pass on `batch` normalized rows. With `cache`, the input and
    /// every layer's post-activation output are kept for backpropagation.
    fn run(&self, x: &[f64], batch: usize, mut cache: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut act = x.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(batch * layer.outputs);
            for _ in 0..batch {
                z.extend_from_slice(&layer.biases);
            }
            // z += act · Wᵀ
            gemm(
                batch,
                layer.inputs,
                layer.outputs,
                &act,
                (layer.inputs, 1),
                &layer.weights,
                (1, layer.inputs),
                &mut z,
                (layer.outputs, 1),
                1.0,
            );
            if li < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if let Some(c) = cache.as_deref_mut() {
                c.push(std::mem::replace(&mut act, z));
            } else {
                act = z;
            }
        }
        act
    }
}

/// `C = A B + beta C` on strided row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Gradient with the same layout as the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradient {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGradient {
    fn zeros_like(map: &MlpMap) -> Self {
        Self {
            weights: map
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            biases: map
                .layers
                .iter()
                .map(|l| vec![0.0; l.biases.len()])
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Normalized features and targets, one row per sample.
struct Prepared {
    x: Vec<f64>,
    t: Vec<f64>,
    in_width: usize,
    t_width: usize,
    rows: usize,
}

fn prepare(map: &MlpMap, samples: &[&TrainingSample]) -> Result<Prepared> {
    let n = map.dim;
    let in_width = map.input.width(n);
    let t_width = packed_len(n);
    let mut x = Vec::with_capacity(samples.len() * in_width);
    let mut t = Vec::with_capacity(samples.len() * t_width);
    for s in samples {
        map.features(&s.p_hat, s.x_hat.as_deref(), &mut x)?;
        if s.p_target.dim() != n {
            return Err(Error::invalid(
                "target dimension does not match the network",
            ));
        }
        let d = &map.output_scale;
        let mut idx = 0;
        for i in 0..n {
            for j in i..n {
                t.push(s.p_target.upper()[idx] / (d[i] * d[j]));
                idx += 1;
            }
        }
    }
    Ok(Prepared {
        x,
        t,
        in_width,
        t_width,
        rows: samples.len(),
    })
}

fn l2_penalty(map: &MlpMap) -> f64 {
    map.layers
        .iter()
        .map(|l| l.weights.iter().map(|w| w * w).sum::<f64>())
        .sum()
}

/// Batch-mean weighted upper-triangle loss plus `l2 Σ W²`, optionally with its gradient.
fn loss_on_rows(
    map: &MlpMap,
    data: &Prepared,
    rows: &[usize],
    weights: &LossWeights,
    l2: f64,
    want_grad: bool,
) -> (f64, Option<MlpGradient>) {
    let n = map.dim;
    let batch = rows.len();
    let mut x = Vec::with_capacity(batch * data.in_width);
    for &r in rows {
        x.extend_from_slice(&data.x[r * data.in_width..(r + 1) * data.in_width]);
    }
    let mut cache = Vec::with_capacity(map.layers.len());
    let out = map.run(&x, batch, want_grad.then_some(&mut cache));

    let inv_b = 1.0 / batch as f64;
    let mut data_loss = 0.0;
    let mut d_out = if want_grad {
        vec![0.0; out.len()]
    } else {
        Vec::new()
    };
    let ow = map.output.width(n);
    let mut u = vec![0.0; n * n];
    let mut q = vec![0.0; n * n];
    let mut dq = vec![0.0; n * n];
    for (bi, &r) in rows.iter().enumerate() {
        let raw = &out[bi * ow..(bi + 1) * ow];
        map.output.expand(raw, n, &mut q);
        let target = &data.t[r * data.t_width..(r + 1) * data.t_width];
        let mut idx = 0;
        for i in 0..n {
            for j in i..n {
                let m: f64 = (0..n).map(|k| q[i * n + k] * q[j * n + k]).sum();
                let e = m - target[idx];
                let w = weights.upper[idx];
                data_loss += w * e * e;
                // U + Uᵀ with U upper triangular holding 2wE
                let g = 2.0 * w * e * inv_b;
                u[i * n + j] = g;
                u[j * n + i] = g;
                if i == j {
                    u[i * n + i] = 2.0 * g;
                }
                idx += 1;
            }
        }
        if want_grad {
            for i in 0..n {
                for k in 0..n {
                    dq[i * n + k] = (0..n).map(|j| u[i * n + j] * q[j * n + k]).sum();
                }
            }
            map.output
                .pull_back(raw, n, &dq, &mut d_out[bi * ow..(bi + 1) * ow]);
        }
    }
    let loss = data_loss * inv_b + l2 * l2_penalty(map);
    if !want_grad {
        return (loss, None);
    }

    let mut grad = MlpGradient::zeros_like(map);
    let mut delta = d_out;
    for li in (0..map.layers.len()).rev() {
        let layer = &map.layers[li];
        let input = &cache[li];
        // dW = δᵀ · input
        gemm(
            layer.outputs,
            batch,
            layer.inputs,
            &delta,
            (1, layer.outputs),
            input,
            (layer.inputs, 1),
            &mut grad.weights[li],
            (layer.inputs, 1),
            0.0,
        );
        for (g, w) in grad.weights[li].iter_mut().zip(&layer.weights) {
            *g += 2.0 * l2 * w;
        }
        for row in delta.chunks_exact(layer.outputs) {
            for (g, d) in grad.biases[li].iter_mut().zip(row) {
                *g += d;
            }
        }
        if li > 0 {
            let mut prev = vec![0.0; batch * layer.inputs];
            gemm(
                batch,
                layer.outputs,
                layer.inputs,
                &delta,
                (layer.outputs, 1),
                &layer.weights,
                (layer.inputs, 1),
                &mut prev,
                (layer.inputs, 1),
                0.0,
            );
            // ReLU derivative from the stored post-activations
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
    (loss, Some(grad))
}

fn check_weights(map: &MlpMap, weights: &LossWeights) -> Result<()> {
    if weights.dim != map.dim {
        return Err(Error::invalid(
            "loss weights do not match the network dimension",
        ));
    }
    Ok(())
}

/// `(1/B) Σ_b Σ_{i≤j} wᵢⱼ ((QQᵀ)ⁱʲ − Pⁱʲ)² + l2 Σ W²`, with `QQᵀ` and `P` in
/// the network's output scale.
pub fn mlp_loss(
    map: &MlpMap,
    batch: &[TrainingSample],
    weights: &LossWeights,
    l2: f64,
) -> Result<f64> {
    Ok(mlp_loss_and_gradient_impl(map, batch, weights, l2, false)?.0)
}

pub fn mlp_loss_and_gradient(
    map: &MlpMap,
    batch: &[TrainingSample],
    weights: &LossWeights,
    l2: f64,
) -> Result<(f64, MlpGradient)> {
    let (loss, grad) = mlp_loss_and_gradient_impl(map, batch, weights, l2, true)?;
    Ok((loss, grad.expect("requested")))
}

fn mlp_loss_and_gradient_impl(
    map: &MlpMap,
    batch: &[TrainingSample],
    weights: &LossWeights,
    l2: f64,
    want_grad: bool,
) -> Result<(f64, Option<MlpGradient>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("loss batch"));
    }
    check_weights(map, weights)?;
    let refs: Vec<&TrainingSample> = batch.iter().collect();
    let data = prepare(map, &refs)?;
    let rows: Vec<usize> = (0..data.rows).collect();
    Ok(loss_on_rows(map, &data, &rows, weights, l2, want_grad))
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: MlpGradient,
    v: MlpGradient,
}

impl Adam {
    pub fn new(map: &MlpMap, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: MlpGradient::zeros_like(map),
            v: MlpGradient::zeros_like(map),
        }
    }

    pub fn step(&mut self, map: &mut MlpMap, grad: &MlpGradient) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        };
        for (li, layer) in map.layers.iter_mut().enumerate() {
            update(
                &mut layer.weights,
                &grad.weights[li],
                &mut self.m.weights[li],
                &mut self.v.weights[li],
            );
            update(
                &mut layer.biases,
                &grad.biases[li],
                &mut self.m.biases[li],
                &mut self.v.biases[li],
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub hidden: Vec<usize>,
    pub input: InputSpec,
    #[serde(default)]
    pub output: OutputForm,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Standardize inputs and scale outputs by the mean target diagonal.
    pub normalize: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            input: InputSpec::Covariance,
            output: OutputForm::Square,
            l2: 0.0,
            epochs: 10,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            normalize: true,
        }
    }
}

/// Named architectures with their regularization, epochs and loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPreset {
    pub name: &'static str,
    pub hidden: &'static [usize],
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub input: InputSpec,
    pub weights: &'static str,
}

impl MlpPreset {
    pub const ALL: [MlpPreset; 4] = [
        MlpPreset {
            name: "ekf2d-h3",
            hidden: &[512, 512, 256, 256, 128, 64],
            l2: 1e-4,
            epochs: 50,
            batch_size: 32,
            input: InputSpec::Covariance,
            weights: "ekf2d",
        },
        MlpPreset {
            name: "ekf2d-h4",
            hidden: &[128, 128, 128, 128, 128],
            l2: 1e-3,
            epochs: 150,
            batch_size: 32,
            input: InputSpec::StateAndCovariance,
            weights: "ekf2d",
        },
        MlpPreset {
            name: "vio-h3",
            hidden: &[1024, 512, 256, 128, 64],
            l2: 1e-3,
            epochs: 25,
            batch_size: 32,
            input: InputSpec::Covariance,
            weights: "vio",
        },
        MlpPreset {
            name: "vio-h4",
            hidden: &[256, 256, 256, 128, 128],
            l2: 1e-3,
            epochs: 50,
            batch_size: 32,
            input: InputSpec::StateAndCovariance,
            weights: "vio",
        },
    ];

    pub fn by_name(name: &str) -> Result<&'static MlpPreset> {
        Self::ALL
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown network preset {name:?}")))
    }

    pub fn options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            hidden: self.hidden.to_vec(),
            input: self.input,
            output: OutputForm::Cholesky,
            l2: self.l2,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            ..TrainOptions::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights::preset(self.weights).expect("preset weights exist")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    /// Full training-set loss after each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses
            .last()
            .copied()
            .unwrap_or(self.initial_loss)
    }
}

fn full_loss(map: &MlpMap, data: &Prepared, weights: &LossWeights, l2: f64) -> f64 {
    const CHUNK: usize = 2048;
    let mut sum = 0.0;
    let all: Vec<usize> = (0..data.rows).collect();
    let penalty = l2 * l2_penalty(map);
    for rows in all.chunks(CHUNK) {
        let (loss, _) = loss_on_rows(map, data, rows, weights, 0.0, false);
        sum += loss * rows.len() as f64;
    }
    sum / data.rows as f64 + penalty
}

/// Minibatch Adam on the weighted upper-triangle loss. Initialization and the
/// per-epoch shuffles are fixed by `opts.seed`.
pub fn train_mlp(
    ts: &TrainingSet,
    opts: &TrainOptions,
    weights: &LossWeights,
) -> Result<(MlpMap, TrainReport)> {
    if opts.input == InputSpec::StateAndCovariance && !ts.has_state() {
        return Err(Error::invalid(
            "state-dependent network needs state estimates in the training set",
        ));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if !(opts.learning_rate > 0.0) || !(opts.l2 >= 0.0) {
        return Err(Error::invalid(
            "learning rate must be positive and l2 nonnegative",
        ));
    }
    let mut map = MlpMap::with_output(ts.dim(), opts.input, opts.output, &opts.hidden, opts.seed)?;
    check_weights(&map, weights)?;
    if opts.normalize {
        let mut raw = Vec::new();
        for s in ts.samples() {
            map.raw_features(&s.p_hat, s.x_hat.as_deref(), &mut raw)?;
        }
        map.input_norm = Normalizer::fit(&raw, opts.input.width(ts.dim()));
        let count = ts.len() as f64;
        map.output_scale = (0..ts.dim())
            .map(|i| {
                let mean = ts
                    .samples()
                    .iter()
                    .map(|s| s.p_target.get(i, i))
                    .sum::<f64>()
                    / count;
                if mean > 0.0 {
                    mean.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
    }
    let refs: Vec<&TrainingSample> = ts.samples().iter().collect();
    let data = prepare(&map, &refs)?;
    let initial_loss = full_loss(&map, &data, weights, opts.l2);
    if !initial_loss.is_finite() {
        return Err(Error::TrainingDiverged { epoch: 0, step: 0 });
    }

    let mut adam = Adam::new(
        &map,
        opts.learning_rate,
        opts.beta1,
        opts.beta2,
        opts.epsilon,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..data.rows).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut steps = 0;
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        for (step, rows) in order.chunks(opts.batch_size).enumerate() {
            let (loss, grad) = loss_on_rows(&map, &data, rows, weights, opts.l2, true);
            let grad = grad.expect("requested");
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::TrainingDiverged { epoch, step });
            }
            adam.step(&mut map, &grad);
            steps += 1;
        }
        let loss = full_loss(&map, &data, weights, opts.l2);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                step: order.len().div_ceil(opts.batch_size),
            });
        }
        log::debug!("epoch {epoch}: loss {loss:.6e}");
        epoch_losses.push(loss);
    }
    Ok((
        map,
        TrainReport {
            initial_loss,
            epoch_losses,
            steps,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_pd;
    use super::*;
    use nalgebra::DMatrix;

    fn samples(
        rng: &mut ChaCha8Rng,
        n: usize,
        count: usize,
        with_state: bool,
    ) -> Vec<TrainingSample> {
        (0..count)
            .map(|k| TrainingSample {
                p_hat: random_pd(rng, n),
                x_hat: with_state.then(|| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()),
                p_target: random_pd(rng, n),
                sequence: 0,
                step: k,
            })
            .collect()
    }

    fn flat_params(map: &MlpMap) -> Vec<f64> {
        map.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    fn set_flat(map: &mut MlpMap, idx: usize, value: f64) {
        let mut i = idx;
        for l in &mut map.layers {
            if i < l.weights.len() {
                l.weights[i] = value;
                return;
            }
            i -= l.weights.len();
            if i < l.biases.len() {
                l.biases[i] = value;
                return;
            }
            i -= l.biases.len();
        }
        panic!("index out of range");
    }

    fn flat_grad(g: &MlpGradient) -> Vec<f64> {
        g.weights
            .iter()
            .zip(&g.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    fn random_biases(map: &mut MlpMap, rng: &mut ChaCha8Rng) {
        for l in &mut map.layers {
            l.biases
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut map = MlpMap::new(3, InputSpec::Covariance, &[5], 1).unwrap();
        for l in &mut map.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        let p = map.forward(&CovMatrix::identity(3), None).unwrap();
        assert!(p.upper().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_reshape_layer_reproduces_fixed_q() {
        // no hidden layers: zero weights, biases holding Q₀
        let mut map = MlpMap::new(2, InputSpec::Covariance, &[], 1).unwrap();
        let q0 = [1.0, 2.0, -0.5, 3.0];
        map.layers[0].weights.iter_mut().for_each(|w| *w = 0.0);
        map.layers[0].biases = q0.to_vec();
        let p = map
            .forward(&random_pd(&mut ChaCha8Rng::seed_from_u64(1), 2), None)
            .unwrap();
        let q = DMatrix::from_row_slice(2, 2, &q0);
        assert!((p.to_full() - &q * q.transpose()).norm() < 1e-14);
    }

    #[test]
    fn dimension_mismatches_rejected() {
        let map = MlpMap::new(3, InputSpec::StateAndCovariance, &[4], 1).unwrap();
        assert!(map.forward(&CovMatrix::identity(2), None).is_err());
        assert!(map.forward(&CovMatrix::identity(3), None).is_err());
        assert!(map
            .forward(&CovMatrix::identity(3), Some(&DVector::zeros(2)))
            .is_err());
        assert!(map
            .forward(&CovMatrix::identity(3), Some(&DVector::zeros(3)))
            .is_ok());
    }

    #[test]
    fn exact_q_gives_zero_loss_and_weights_scale_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = MlpMap::new(3, InputSpec::Covariance, &[6], 3).unwrap();
        let mut batch = samples(&mut rng, 3, 4, false);
        for s in &mut batch {
            s.p_target = map.forward(&s.p_hat, None).unwrap();
        }
        let w = LossWeights::uniform(3);
        assert!(mlp_loss(&map, &batch, &w, 0.0).unwrap() < 1e-24);
        let batch = samples(&mut rng, 3, 4, false);
        let a = mlp_loss(&map, &batch, &w, 0.0).unwrap();
        let b = mlp_loss(&map, &batch, &w.scaled(2.0), 0.0).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12 * b);
    }

    fn check_gradient(map: &mut MlpMap, batch: &[TrainingSample], w: &LossWeights, l2: f64) -> f64 {
        let (_, g) = mlp_loss_and_gradient(map, batch, w, l2).unwrap();
        let g = flat_grad(&g);
        let params = flat_params(map);
        // entries far below the largest one are compared against a floor
        let floor = 1e-3 * g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst: f64 = 0.0;
        for (i, &p) in params.iter().enumerate() {
            let h = 1e-5 * p.abs().max(1.0);
            set_flat(map, i, p + h);
            let lp = mlp_loss(map, batch, w, l2).unwrap();
            set_flat(map, i, p - h);
            let lm = mlp_loss(map, batch, w, l2).unwrap();
            set_flat(map, i, p);
            let fd = (lp - lm) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs()).max(floor);
            worst = worst.max((fd - g[i]).abs() / scale);
        }
        worst
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // a 6-10-9 network: 3x3 covariances, one hidden layer of 10
        for trial in 0..20 {
            let mut map = MlpMap::new(3, InputSpec::Covariance, &[10], 100 + trial).unwrap();
            random_biases(&mut map, &mut rng);
            let batch = samples(&mut rng, 3, 7, false);
            let worst = check_gradient(
                &mut map,
                &batch,
                &LossWeights::diagonal_offdiagonal(3, 5.0, 1.0),
                1e-3,
            );
            assert!(worst < 1e-4, "trial {trial}: {worst}");
        }
    }

    #[test]
    fn cholesky_output_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let mut map = MlpMap::with_output(
                3,
                InputSpec::StateAndCovariance,
                OutputForm::Cholesky,
                &[10],
                200 + trial,
            )
            .unwrap();
            random_biases(&mut map, &mut rng);
            let batch = samples(&mut rng, 3, 7, true);
            let worst = check_gradient(
                &mut map,
                &batch,
                &LossWeights::diagonal_offdiagonal(3, 5.0, 1.0),
                1e-3,
            );
            assert!(worst < 1e-4, "trial {trial}: {worst}");
        }
    }

    #[test]
    fn cholesky_output_is_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map =
            MlpMap::with_output(4, InputSpec::Covariance, OutputForm::Cholesky, &[8], 1).unwrap();
        assert_eq!(map.layers.last().unwrap().outputs, 10);
        for _ in 0..50 {
            let p = map.forward(&random_pd(&mut rng, 4), None).unwrap();
            let l = p.to_full().cholesky().expect("positive definite").l();
            assert!((0..4).all(|i| l[(i, i)] > 0.0));
        }
    }

    #[test]
    fn gradient_check_with_state_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut map = MlpMap::new(2, InputSpec::StateAndCovariance, &[7, 5], 8).unwrap();
        random_biases(&mut map, &mut rng);
        map.input_norm = Normalizer {
            mean: vec![0.1, -0.2, 0.5, 0.0, 0.4],
            std: vec![2.0, 0.5, 1.5, 1.0, 0.7],
        };
        map.output_scale = vec![0.3, 2.0];
        let batch = samples(&mut rng, 2, 6, true);
        let worst = check_gradient(&mut map, &batch, &LossWeights::uniform(2), 0.01);
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn batch_forward_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = MlpMap::new(3, InputSpec::StateAndCovariance, &[16, 8], 2).unwrap();
        let ps: Vec<_> = (0..2100).map(|_| random_pd(&mut rng, 3)).collect();
        let xs: Vec<_> = (0..2100)
            .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let all = map.forward_all(&ps, Some(&xs)).unwrap();
        for i in [0, 1023, 1024, 2099] {
            let one = map.forward(&ps[i], Some(&xs[i])).unwrap();
            let diff: f64 = one
                .upper()
                .iter()
                .zip(all[i].upper())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff < 1e-12);
        }
    }

    fn scalar_task(rng: &mut ChaCha8Rng, count: usize, c: f64) -> TrainingSet {
        TrainingSet::new(
            (0..count)
                .map(|k| {
                    let p = random_pd(rng, 2);
                    TrainingSample {
                        p_target: p.scaled(c),
                        p_hat: p,
                        x_hat: None,
                        sequence: 0,
                        step: k,
                    }
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn training_is_seeded_and_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ts = scalar_task(&mut rng, 600, 3.0);
        let opts = TrainOptions {
            hidden: vec![32, 32],
            epochs: 1,
            seed: 7,
            ..TrainOptions::default()
        };
        let (a, _) = train_mlp(&ts, &opts, &LossWeights::uniform(2)).unwrap();
        let (b, _) = train_mlp(&ts, &opts, &LossWeights::uniform(2)).unwrap();
        assert_eq!(a, b);
        let opts = TrainOptions {
            epochs: 30,
            learning_rate: 3e-3,
            ..opts
        };
        let (_, report) = train_mlp(&ts, &opts, &LossWeights::uniform(2)).unwrap();
        assert!(report.final_loss() <= report.initial_loss);
        assert!(
            report.final_loss() < 0.1 * report.initial_loss,
            "{report:?}"
        );
    }

    #[test]
    fn state_network_needs_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ts = scalar_task(&mut rng, 10, 1.0);
        let opts = TrainOptions {
            input: InputSpec::StateAndCovariance,
            ..TrainOptions::default()
        };
        assert!(train_mlp(&ts, &opts, &LossWeights::uniform(2)).is_err());
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ts = scalar_task(&mut rng, 64, 1.0);
        ts = TrainingSet::new(
            ts.samples()
                .iter()
                .map(|s| TrainingSample {
                    p_target: s.p_target.scaled(1e200),
                    ..s.clone()
                })
                .collect(),
        )
        .unwrap();
        let opts = TrainOptions {
            normalize: false,
            learning_rate: 1e3,
            epochs: 5,
            ..TrainOptions::default()
        };
        assert!(matches!(
            train_mlp(&ts, &opts, &LossWeights::uniform(2)),
            Err(Error::TrainingDiverged { .. })
        ));
    }

    #[test]
    fn presets_exist() {
        assert_eq!(
            MlpPreset::by_name("ekf2d-h3").unwrap().hidden,
            &[512, 512, 256, 256, 128, 64]
        );
        assert_eq!(MlpPreset::by_name("vio-h4").unwrap().epochs, 50);
        assert!(MlpPreset::by_name("nope").is_err());
        let map = MlpMap::new(
            4,
            InputSpec::Covariance,
            MlpPreset::by_name("ekf2d-h3").unwrap().hidden,
            0,
        )
        .unwrap();
        assert!(map.validate().is_ok());
        assert_eq!(map.hidden_widths(), vec![512, 512, 256, 256, 128, 64]);
    }
}
