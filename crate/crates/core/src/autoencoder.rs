//! Column-wise encoder–decoder defining the patch manifold, with exact
//! reverse-mode gradients, Adam and the noise source for denoising training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{gemm, DenseTensor, Matrix};

/// Negative slope of the hidden-layer leaky rectifier.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } if v <= 0.0 => slope * v,
            _ => v,
        }
    }

    /// Derivative recovered from the activation output. With a positive
    /// slope the output has the sign of the pre-activation.
    #[inline]
    fn derivative_at_output(self, out: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } if out <= 0.0 => slope,
            _ => 1.0,
        }
    }
}

/// Whether hidden layers get the leaky rectifier or stay linear. The linear
/// mode is a rank-limited subspace model used as a baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AeMode {
    Nonlinear { slope: f64 },
    Linear,
}

impl Default for AeMode {
    fn default() -> Self {
        AeMode::Nonlinear {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Encoder–decoder parameters. The layer size chain `d_0, ..., d_L` is
/// symmetric with `d_L = d_0 = D`; the middle entry is the bottleneck `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

/// `[D, c·D, r, c·D, D]` in nonlinear mode, `[D, r, D]` in linear mode.
pub fn default_chain(d: usize, r: usize, hidden_factor: usize, mode: AeMode) -> Vec<usize> {
    match mode {
        AeMode::Linear => vec![d, r, d],
        AeMode::Nonlinear { .. } => vec![d, hidden_factor * d, r, hidden_factor * d, d],
    }
}

fn validate_chain(dims: &[usize]) -> Result<()> {
    let bad = |reason: &str| Error::InvalidChain {
        dims: dims.to_vec(),
        reason: reason.into(),
    };
    if dims.len() < 3 || dims.len() % 2 == 0 {
        return Err(bad("need an odd number of at least three sizes"));
    }
    if dims.contains(&0) {
        return Err(bad("layer sizes must be positive"));
    }
    if dims.iter().zip(dims.iter().rev()).any(|(a, b)| a != b) {
        return Err(bad("chain must be symmetric about the bottleneck"));
    }
    let r = dims[dims.len() / 2];
    if r > dims[0] {
        return Err(bad("bottleneck wider than the input"));
    }
    Ok(())
}

/// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))`, zero biases.
pub fn init_params(dims: &[usize], mode: AeMode, seed: u64) -> Result<MlpParams> {
    let slope = match mode {
        AeMode::Nonlinear { slope } => {
            if !(slope > 0.0 && slope.is_finite()) {
                return Err(Error::param(format!("leaky slope must be positive, got {slope}")));
            }
            Some(slope)
        }
        AeMode::Linear => None,
    };
    validate_chain(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.len() - 1;
    let layers = (0..n)
        .map(|l| {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight = Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..=bound));
            let activation = match slope {
                Some(slope) if l + 1 < n => Activation::LeakyRelu { slope },
                _ => Activation::Identity,
            };
            Layer {
                weight,
                bias: vec![0.0; fan_out],
                activation,
            }
        })
        .collect();
    Ok(MlpParams { layers })
}

impl MlpParams {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::param("an auto-encoder needs at least one layer"))?;
        let mut dims = vec![first.weight.cols()];
        for (l, layer) in layers.iter().enumerate() {
            if layer.weight.cols() != *dims.last().unwrap() {
                return Err(Error::mismatch(format!("layer {l} input width does not match the previous layer")));
            }
            if layer.bias.len() != layer.weight.rows() {
                return Err(Error::mismatch(format!("layer {l} bias length differs from its output width")));
            }
            if layer.weight.data().iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::param(format!("layer {l} has non-finite parameters")));
            }
            if let Activation::LeakyRelu { slope } = layer.activation {
                if !(slope > 0.0 && slope.is_finite()) {
                    return Err(Error::param(format!("layer {l} has slope {slope}")));
                }
            }
            dims.push(layer.weight.rows());
        }
        if layers.last().unwrap().activation != Activation::Identity {
            return Err(Error::param("the output layer must be linear"));
        }
        validate_chain(&dims)?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.rows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    /// Index of the layer whose output is the latent code.
    pub fn bottleneck_layer(&self) -> usize {
        self.layers.len() / 2 - 1
    }

    pub fn bottleneck_width(&self) -> usize {
        self.layers[self.bottleneck_layer()].weight.rows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    pub fn is_linear(&self) -> bool {
        self.layers.iter().all(|l| l.activation == Activation::Identity)
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Same architecture with every weight and bias set to zero.
    pub fn zeroed(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                bias: vec![0.0; l.bias.len()],
                activation: l.activation,
            })
            .collect();
        Self { layers }
    }

    /// `φ_r` applied to every column.
    pub fn encode(&self, h: &Matrix) -> Result<Matrix> {
        self.check_input(h)?;
        Ok(run_layers(&self.layers[..=self.bottleneck_layer()], h.clone()))
    }

    /// `ψ_r` applied to every column of an `r × n` latent block.
    pub fn decode(&self, latent: &Matrix) -> Result<Matrix> {
        if latent.rows() != self.bottleneck_width() {
            return Err(Error::mismatch(format!(
                "latent points have {} coordinates, bottleneck has {}",
                latent.rows(),
                self.bottleneck_width()
            )));
        }
        Ok(run_layers(&self.layers[self.bottleneck_layer() + 1..], latent.clone()))
    }

    /// `ψ_r(φ_r(h))` without keeping intermediates.
    pub fn apply(&self, h: &Matrix) -> Result<Matrix> {
        self.check_input(h)?;
        Ok(run_layers(&self.layers, h.clone()))
    }

    fn check_input(&self, h: &Matrix) -> Result<()> {
        if h.rows() != self.input_dim() {
            return Err(Error::mismatch(format!(
                "input has {} rows, auto-encoder expects {}",
                h.rows(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

fn layer_forward(layer: &Layer, input: &Matrix) -> Matrix {
    let cols = input.cols();
    let mut out = Matrix::zeros(layer.weight.rows(), cols);
    for (row, &b) in out.data_mut().chunks_exact_mut(cols).zip(&layer.bias) {
        row.fill(b);
    }
    gemm(1.0, &layer.weight, false, input, false, 1.0, &mut out);
    if layer.activation != Activation::Identity {
        for v in out.data_mut() {
            *v = layer.activation.apply(*v);
        }
    }
    out
}

fn run_layers(layers: &[Layer], mut a: Matrix) -> Matrix {
    for layer in layers {
        a = layer_forward(layer, &a);
    }
    a
}

/// Activations of a forward pass, kept for [`ae_backward`].
#[derive(Clone, Debug)]
pub struct AeForward {
    /// `a_0 = input, a_1, ..., a_L = output`
    activations: Vec<Matrix>,
    bottleneck: usize,
}

impl AeForward {
    pub fn input(&self) -> &Matrix {
        &self.activations[0]
    }

    pub fn latent(&self) -> &Matrix {
        &self.activations[self.bottleneck + 1]
    }

    pub fn output(&self) -> &Matrix {
        self.activations.last().unwrap()
    }
}

pub fn ae_forward(p: &MlpParams, h: &Matrix) -> Result<AeForward> {
    ae_forward_owned(p, h.clone())
}

/// [`ae_forward`] taking ownership of the input to avoid a copy.
pub fn ae_forward_owned(p: &MlpParams, h: Matrix) -> Result<AeForward> {
    p.check_input(&h)?;
    let mut activations = Vec::with_capacity(p.layers.len() + 1);
    activations.push(h);
    for layer in &p.layers {
        let next = layer_forward(layer, activations.last().unwrap());
        activations.push(next);
    }
    Ok(AeForward {
        activations,
        bottleneck: p.bottleneck_layer(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeGrads {
    pub layers: Vec<LayerGrad>,
    /// gradient with respect to the auto-encoder input
    pub input: Matrix,
}

/// Reverse-mode gradients of `⟨upstream, ae_forward(p, h).output⟩`.
pub fn ae_backward(p: &MlpParams, fwd: &AeForward, upstream: &Matrix) -> Result<AeGrads> {
    if fwd.activations.len() != p.layers.len() + 1
        || p
            .layers
            .iter()
            .zip(&fwd.activations)
            .any(|(l, a)| a.rows() != l.weight.cols())
    {
        return Err(Error::CacheMismatch("activations were not produced by these parameters".into()));
    }
    if upstream.shape() != fwd.output().shape() {
        return Err(Error::mismatch(format!(
            "upstream gradient {:?} vs output {:?}",
            upstream.shape(),
            fwd.output().shape()
        )));
    }
    let mut g = upstream.clone();
    let mut layers = Vec::with_capacity(p.layers.len());
    for (l, layer) in p.layers.iter().enumerate().rev() {
        let out = &fwd.activations[l + 1];
        let input = &fwd.activations[l];
        if layer.activation != Activation::Identity {
            for (gv, &o) in g.data_mut().iter_mut().zip(out.data()) {
                *gv *= layer.activation.derivative_at_output(o);
            }
        }
        let mut dw = Matrix::zeros(layer.weight.rows(), layer.weight.cols());
        gemm(1.0, &g, false, input, true, 0.0, &mut dw);
        let cols = g.cols();
        let db = g.data().chunks_exact(cols.max(1)).map(|r| r.iter().sum()).collect();
        let mut prev = Matrix::zeros(input.rows(), cols);
        gemm(1.0, &layer.weight, true, &g, false, 0.0, &mut prev);
        layers.push(LayerGrad { weight: dw, bias: db });
        g = prev;
    }
    layers.reverse();
    Ok(AeGrads { layers, input: g })
}

/// Bias-corrected Adam moments for one flat parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self::with_moments(len, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_moments(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1,
            beta2,
            eps,
            lr,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::mismatch(format!(
                "Adam state holds {} entries, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                index,
                value: grads[index],
            });
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.step(params, grads)
}

/// One [`AdamState`] per weight matrix and bias vector.
#[derive(Clone, Debug)]
pub struct MlpAdam {
    states: Vec<(AdamState, AdamState)>,
}

impl MlpAdam {
    pub fn new(p: &MlpParams, lr: f64) -> Self {
        let states = p
            .layers
            .iter()
            .map(|l| (AdamState::new(l.weight.data().len(), lr), AdamState::new(l.bias.len(), lr)))
            .collect();
        Self { states }
    }

    pub fn set_lr(&mut self, lr: f64) {
        for (w, b) in &mut self.states {
            w.lr = lr;
            b.lr = lr;
        }
    }

    pub fn step(&mut self, p: &mut MlpParams, grads: &AeGrads) -> Result<()> {
        if grads.layers.len() != p.layers.len() {
            return Err(Error::mismatch("gradient layer count differs from the parameters"));
        }
        for ((layer, g), (sw, sb)) in p.layers.iter_mut().zip(&grads.layers).zip(&mut self.states) {
            sw.step(layer.weight.data_mut(), g.weight.data())?;
            sb.step(&mut layer.bias, &g.bias)?;
        }
        Ok(())
    }
}

/// Seeded Gaussian stream; every draw is fresh.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn fill(&mut self, out: &mut [f64], sigma: f64) {
        for v in out {
            let z: f64 = self.rng.sample(StandardNormal);
            *v = sigma * z;
        }
    }

    pub fn sample(&mut self, rows: usize, cols: usize, sigma: f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        self.fill(m.data_mut(), sigma);
        m
    }
}

/// `h + E` with `E` drawn i.i.d. from `N(0, σ²)`.
pub fn add_noise(h: &Matrix, sigma: f64, stream: &mut NoiseStream) -> Result<Matrix> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("noise level must be non-negative, got {sigma}")));
    }
    let mut out = h.clone();
    if sigma > 0.0 {
        for v in out.data_mut() {
            let z: f64 = stream.rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    Ok(out)
}

/// Rectangular lattice of latent points in row-major lattice order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    rows: usize,
    cols: usize,
    /// `r × (rows·cols)`
    points: Matrix,
}

impl LatentGrid {
    pub fn new(rows: usize, cols: usize, points: Matrix) -> Result<Self> {
        if rows == 0 || cols == 0 || points.cols() != rows * cols {
            return Err(Error::mismatch(format!(
                "{rows}x{cols} lattice needs {} points, got {}",
                rows * cols,
                points.cols()
            )));
        }
        Ok(Self { rows, cols, points })
    }

    /// Evenly spaced two-dimensional lattice over `[lo, hi]`; lattice row `i`
    /// moves along latent coordinate 0 and column `j` along coordinate 1.
    pub fn spanning(lo: [f64; 2], hi: [f64; 2], rows: usize, cols: usize) -> Result<Self> {
        let frac = |k: usize, n: usize| if n > 1 { k as f64 / (n - 1) as f64 } else { 0.5 };
        let mut points = Matrix::zeros(2, rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                points.set(0, i * cols + j, lo[0] + (hi[0] - lo[0]) * frac(i, rows));
                points.set(1, i * cols + j, lo[1] + (hi[1] - lo[1]) * frac(j, cols));
            }
        }
        Self::new(rows, cols, points)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }
}

/// Per-coordinate minimum and maximum of a latent block.
pub fn latent_bounds(latent: &Matrix) -> (Vec<f64>, Vec<f64>) {
    (0..latent.rows())
        .map(|i| {
            latent
                .row(i)
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
        })
        .unzip()
}

/// Decodes every lattice point into a `patch.0 × patch.1` tile and tiles
/// them into one `(rows·τ_1) × (cols·τ_2)` montage.
pub fn export_patch_manifold(p: &MlpParams, grid: &LatentGrid, patch: (usize, usize)) -> Result<DenseTensor> {
    let (t1, t2) = patch;
    if t1 * t2 != p.input_dim() {
        return Err(Error::mismatch(format!(
            "a {t1}x{t2} patch does not match the {}-dimensional patch space",
            p.input_dim()
        )));
    }
    let decoded = p.decode(grid.points())?;
    let width = grid.cols * t2;
    let mut montage = DenseTensor::zeros(&[grid.rows * t1, width]);
    let data = montage.data_mut();
    for i in 0..grid.rows {
        for j in 0..grid.cols {
            let k = i * grid.cols + j;
            for a in 0..t1 {
                for b in 0..t2 {
                    data[(i * t1 + a) * width + j * t2 + b] = decoded.get(a * t2 + b, k);
                }
            }
        }
    }
    Ok(montage)
}
