//! Joint optimization of the latent tensor `Z` and the auto-encoder.
//!
//! Each iteration embeds `Z`, perturbs the Hankel matrix with fresh Gaussian
//! noise, runs the auto-encoder, folds the result back and compares it with
//! the observation through the degradation operator. The objective is
//! `L_rec + λ·L_AE`, minimized by Adam with a stepwise learning-rate decay
//! while `λ` is rebalanced multiplicatively.
//!
//! A problem can also embed each slice of a trailing channel mode separately
//! and share one auto-encoder across the concatenated blocks, optionally
//! followed by a learned per-pixel affine color transform.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{ae_backward, ae_forward_owned, default_chain, init_params, AdamState, AeForward, AeGrads, AeMode, MlpAdam, MlpParams, NoiseStream};
use crate::degradation::Degradation;
use crate::embedding::MdtOperator;
use crate::error::{Error, Result};
use crate::imaging::psnr;
use crate::tensor::{DenseTensor, EmbedShape, Matrix};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaMode {
    /// `λ ← up·λ` when `L_rec < L_AE`, else `λ ← down·λ`.
    Balance,
    /// `λ ← up·λ` whenever `L_AE` exceeds `ceiling`, otherwise unchanged.
    Cap { ceiling: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecScaling {
    /// `L_rec = ||Y − F(X)||² / D`
    PerWindow,
    /// `L_rec = ||Y − F(X)||²`
    Unscaled,
    /// Both losses averaged over their entries: observed samples for
    /// `L_rec`, Hankel entries for `L_AE`.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZInit {
    /// Observed values, missing entries mean-filled; normalized adjoint for
    /// down-sampling; a plain copy otherwise.
    Observed,
    /// i.i.d. uniform on `[0, 1)`.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub tau: EmbedShape,
    pub r: usize,
    pub sigma: f64,
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_cadence: usize,
    pub lambda_mode: LambdaMode,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_cadence: usize,
    pub hidden_factor: usize,
    /// Explicit layer widths; overrides `hidden_factor` and `r` when set.
    pub chain: Option<Vec<usize>>,
    pub ae_mode: AeMode,
    pub rec_scaling: RecScaling,
    pub z_init: ZInit,
    /// Iterations between noise-free evaluations against a reference.
    pub eval_cadence: usize,
    /// Stop as soon as an evaluation reaches this PSNR.
    pub stop_psnr: Option<f64>,
}

impl SolverConfig {
    pub fn new(tau: EmbedShape, r: usize, sigma: f64) -> Self {
        Self {
            tau,
            r,
            sigma,
            lambda0: 5.0,
            lambda_up: 1.1,
            lambda_down: 0.99,
            lambda_cadence: 10,
            lambda_mode: LambdaMode::Balance,
            lr0: 0.01,
            lr_decay: 0.98,
            lr_step: 100,
            max_iters: 20000,
            seed: 0,
            checkpoint_cadence: 0,
            hidden_factor: 8,
            chain: None,
            ae_mode: AeMode::default(),
            rec_scaling: RecScaling::PerWindow,
            z_init: ZInit::Observed,
            eval_cadence: 10,
            stop_psnr: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda0", self.lambda0),
            ("lambda_up", self.lambda_up),
            ("lambda_down", self.lambda_down),
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda_down < 1.0 && 1.0 < self.lambda_up) {
            return Err(Error::param(format!(
                "need lambda_down < 1 < lambda_up, got {} and {}",
                self.lambda_down, self.lambda_up
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::param(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if self.lambda_cadence == 0 || self.lr_step == 0 || self.eval_cadence == 0 {
            return Err(Error::param("cadences must be at least 1"));
        }
        if let LambdaMode::Cap { ceiling } = self.lambda_mode {
            if !(ceiling > 0.0) {
                return Err(Error::param(format!("lambda ceiling must be positive, got {ceiling}")));
            }
        }
        if self.chain.is_none() {
            let d = self.tau.window_volume();
            if self.r == 0 || self.hidden_factor == 0 {
                return Err(Error::param("r and hidden_factor must be positive"));
            }
            if self.r > d {
                return Err(Error::param(format!("r = {} exceeds the window volume {d}", self.r)));
            }
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.chain
            .clone()
            .unwrap_or_else(|| default_chain(self.tau.window_volume(), self.r, self.hidden_factor, self.ae_mode))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub l_rec: f64,
    pub l_ae: f64,
    pub lambda: f64,
    pub lr: f64,
    pub psnr: Option<f64>,
}

pub fn lambda_update(lambda: f64, l_rec: f64, l_ae: f64) -> f64 {
    if l_rec < l_ae {
        lambda * 1.1
    } else {
        lambda * 0.99
    }
}

fn lambda_step(cfg: &SolverConfig, lambda: f64, l: Losses) -> f64 {
    match cfg.lambda_mode {
        LambdaMode::Balance => {
            if l.l_rec < l.l_ae {
                lambda * cfg.lambda_up
            } else {
                lambda * cfg.lambda_down
            }
        }
        LambdaMode::Cap { ceiling } => {
            if l.l_ae > ceiling {
                lambda * cfg.lambda_up
            } else {
                lambda
            }
        }
    }
}

pub fn lr_schedule(iter: usize, cfg: &SolverConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((iter / cfg.lr_step) as i32)
}

/// Learned `x = M·u + b` applied independently at every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorTransform {
    pub matrix: Matrix,
    pub bias: Vec<f64>,
}

impl ColorTransform {
    pub fn identity(channels: usize) -> Self {
        Self {
            matrix: Matrix::identity(channels),
            bias: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    /// `u` holds pixels as contiguous channel vectors.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let c = self.channels();
        let mut out = vec![0.0; u.len()];
        for (src, dst) in u.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            for (i, d) in dst.iter_mut().enumerate() {
                *d = self.bias[i] + self.matrix.row(i).iter().zip(src).map(|(m, s)| m * s).sum::<f64>();
            }
        }
        out
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = self.matrix.data().to_vec();
        v.extend_from_slice(&self.bias);
        v
    }

    fn unflatten(&mut self, v: &[f64]) {
        let n = self.matrix.data().len();
        self.matrix.data_mut().copy_from_slice(&v[..n]);
        self.bias.copy_from_slice(&v[n..]);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub ae: MlpParams,
    pub color: Option<ColorTransform>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses {
    pub l_rec: f64,
    pub l_ae: f64,
}

impl Losses {
    pub fn total(&self, lambda: f64) -> f64 {
        self.l_rec + lambda * self.l_ae
    }
}

/// Fixed parts of a reconstruction: observation, operator and embedding.
#[derive(Clone, Debug)]
pub struct Problem {
    f: Degradation,
    y: DenseTensor,
    op: MdtOperator,
    x_shape: Vec<usize>,
    channels: usize,
    channel_mode: bool,
    rec_scale: f64,
    ae_scale: f64,
}

impl Problem {
    /// Embeds all modes of `X` jointly.
    pub fn new(y: &DenseTensor, f: &Degradation, tau: &EmbedShape, scaling: RecScaling) -> Result<Self> {
        Self::build(y, f, tau, scaling, false)
    }

    /// Embeds every slice of the trailing channel mode with the same `τ`
    /// and concatenates the blocks along the column axis.
    pub fn per_channel(y: &DenseTensor, f: &Degradation, tau: &EmbedShape, scaling: RecScaling) -> Result<Self> {
        Self::build(y, f, tau, scaling, true)
    }

    fn build(y: &DenseTensor, f: &Degradation, tau: &EmbedShape, scaling: RecScaling, channel_mode: bool) -> Result<Self> {
        let x_shape = f.input_shape(y.shape());
        if f.output_shape(&x_shape)?.as_slice() != y.shape() {
            return Err(Error::mismatch(format!("observation {:?} is not in the range of F", y.shape())));
        }
        let (spatial, channels) = if channel_mode {
            if x_shape.len() < 2 {
                return Err(Error::mismatch("channel mode needs at least two modes"));
            }
            (&x_shape[..x_shape.len() - 1], x_shape[x_shape.len() - 1])
        } else {
            (&x_shape[..], 1)
        };
        let op = MdtOperator::new(spatial, tau)?;
        let (rec_scale, ae_scale) = match scaling {
            RecScaling::PerWindow => (1.0 / op.rows() as f64, 1.0),
            RecScaling::Unscaled => (1.0, 1.0),
            RecScaling::Mean => {
                let observed = match f {
                    Degradation::Mask(m) => m.observed_count(),
                    _ => y.len(),
                };
                (1.0 / observed.max(1) as f64, 1.0 / (op.rows() * op.cols() * channels) as f64)
            }
        };
        // missing entries of a masked observation carry no information
        let y = match f {
            Degradation::Mask(_) => f.apply(y)?,
            _ => y.clone(),
        };
        Ok(Self {
            f: f.clone(),
            y,
            op,
            x_shape,
            channels,
            channel_mode,
            rec_scale,
            ae_scale,
        })
    }

    pub fn x_shape(&self) -> &[usize] {
        &self.x_shape
    }

    pub fn observation(&self) -> &DenseTensor {
        &self.y
    }

    pub fn degradation(&self) -> &Degradation {
        &self.f
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_per_channel(&self) -> bool {
        self.channel_mode
    }

    pub fn embed_rows(&self) -> usize {
        self.op.rows()
    }

    pub fn block_cols(&self) -> usize {
        self.op.cols()
    }

    pub fn embed_cols(&self) -> usize {
        self.op.cols() * self.channels
    }

    fn check_params(&self, z: &DenseTensor, params: &ModelParams) -> Result<()> {
        if z.shape() != self.x_shape.as_slice() {
            return Err(Error::mismatch(format!("latent {:?} vs expected {:?}", z.shape(), self.x_shape)));
        }
        if params.ae.input_dim() != self.op.rows() {
            return Err(Error::mismatch(format!(
                "auto-encoder input {} vs window volume {}",
                params.ae.input_dim(),
                self.op.rows()
            )));
        }
        if let Some(c) = &params.color {
            if !self.channel_mode || c.channels() != self.channels || c.matrix.shape() != (self.channels, self.channels) {
                return Err(Error::mismatch("color transform does not match the channel layout"));
            }
        }
        Ok(())
    }

    /// Block Hankel matrix `[H(Z_1) … H(Z_C)]`.
    pub fn embed(&self, z: &DenseTensor) -> Matrix {
        let (d, ld) = (self.embed_rows(), self.embed_cols());
        let mut out = vec![0.0; d * ld];
        for (c, ch) in split_channels(z.data(), self.channels).iter().enumerate() {
            self.op.forward_into(ch, &mut out, ld, c * self.block_cols());
        }
        Matrix::from_parts(d, ld, out)
    }

    /// Per-block `H†`, interleaved back into channel-last layout.
    pub fn unembed(&self, m: &Matrix) -> DenseTensor {
        let ld = self.embed_cols();
        let chans: Vec<Vec<f64>> = (0..self.channels)
            .map(|c| {
                let mut out = vec![0.0; self.op.source_len()];
                self.op.pinv_into(m.data(), ld, c * self.block_cols(), &mut out);
                out
            })
            .collect();
        DenseTensor::from_parts(self.x_shape.clone(), interleave(&chans))
    }

    fn generate(&self, params: &ModelParams, fwd: &AeForward) -> (DenseTensor, DenseTensor) {
        let u = self.unembed(fwd.output());
        let x = match &params.color {
            Some(c) => DenseTensor::from_parts(self.x_shape.clone(), c.apply(u.data())),
            None => u.clone(),
        };
        (u, x)
    }

    /// Noise-free output `X̂ = C(H† A(H(Z)))`.
    pub fn output(&self, z: &DenseTensor, params: &ModelParams) -> Result<DenseTensor> {
        self.check_params(z, params)?;
        let fwd = ae_forward_owned(&params.ae, self.embed(z))?;
        Ok(self.generate(params, &fwd).1)
    }

    /// Losses for the perturbation `noise` (`D × C·T`).
    pub fn losses(self: &Arc<Self>, z: &DenseTensor, params: &ModelParams, noise: &Matrix) -> Result<(Losses, Cache)> {
        self.check_params(z, params)?;
        let h = self.embed(z);
        if noise.shape() != h.shape() {
            return Err(Error::mismatch(format!("noise {:?} vs Hankel {:?}", noise.shape(), h.shape())));
        }
        let mut hn = h.clone();
        for (v, e) in hn.data_mut().iter_mut().zip(noise.data()) {
            *v += e;
        }
        let fwd = ae_forward_owned(&params.ae, hn)?;
        let (u, x) = self.generate(params, &fwd);
        let fx = self.f.apply(&x)?;
        let residual = DenseTensor::from_parts(
            fx.shape().to_vec(),
            self.y.data().iter().zip(fx.data()).map(|(y, f)| y - f).collect(),
        );
        let l_rec = self.rec_scale * residual.norm_sq();
        let l_ae = self.ae_scale
            * h.data()
                .iter()
                .zip(fwd.output().data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        let losses = Losses { l_rec, l_ae };
        let cache = Cache {
            problem: Arc::clone(self),
            params: params.clone(),
            h,
            fwd,
            u,
            x,
            residual,
            losses,
        };
        Ok((losses, cache))
    }
}

/// Intermediates of one loss evaluation.
#[derive(Clone, Debug)]
pub struct Cache {
    problem: Arc<Problem>,
    params: ModelParams,
    h: Matrix,
    fwd: AeForward,
    u: DenseTensor,
    x: DenseTensor,
    residual: DenseTensor,
    losses: Losses,
}

impl Cache {
    pub fn losses(&self) -> Losses {
        self.losses
    }

    pub fn hankel(&self) -> &Matrix {
        &self.h
    }

    pub fn ae_output(&self) -> &Matrix {
        self.fwd.output()
    }

    /// `X` generated from the perturbed Hankel matrix.
    pub fn generated(&self) -> &DenseTensor {
        &self.x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub z: DenseTensor,
    pub ae: AeGrads,
    pub color: Option<ColorTransform>,
}

/// Gradient of `L_rec + λ·L_AE` with respect to `Z`, the auto-encoder and
/// the color transform. The noise is held constant.
pub fn backward_total(cache: &Cache, lambda: f64) -> Result<Gradients> {
    let p = &cache.problem;
    let c = p.channels;
    let ld = p.embed_cols();
    let t = p.block_cols();

    let mut gx = p.f.adjoint(&cache.residual)?;
    let s = -2.0 * p.rec_scale;
    for v in gx.data_mut() {
        *v *= s;
    }

    let (gu, color) = match &cache.params.color {
        Some(ct) => {
            let mut gm = Matrix::zeros(c, c);
            let mut gb = vec![0.0; c];
            let mut gu = vec![0.0; gx.len()];
            for ((g, u), out) in gx
                .data()
                .chunks_exact(c)
                .zip(cache.u.data().chunks_exact(c))
                .zip(gu.chunks_exact_mut(c))
            {
                for i in 0..c {
                    gb[i] += g[i];
                    for j in 0..c {
                        gm.data_mut()[i * c + j] += g[i] * u[j];
                        out[j] += ct.matrix.get(i, j) * g[i];
                    }
                }
            }
            (gu, Some(ColorTransform { matrix: gm, bias: gb }))
        }
        None => (gx.into_data(), None),
    };

    let a = cache.fwd.output();
    let mut ga = vec![0.0; a.data().len()];
    for (ch, g) in split_channels(&gu, c).iter().enumerate() {
        p.op.pinv_adjoint_into(g, &mut ga, ld, ch * t);
    }
    let two_l = 2.0 * lambda * p.ae_scale;
    for ((g, &av), &hv) in ga.iter_mut().zip(a.data()).zip(cache.h.data()) {
        *g += two_l * (av - hv);
    }
    let ga = Matrix::from_parts(a.rows(), a.cols(), ga);
    let mut ae = ae_backward(&cache.params.ae, &cache.fwd, &ga)?;

    let mut gh = std::mem::replace(&mut ae.input, Matrix::zeros(0, 0));
    for ((g, &hv), &av) in gh.data_mut().iter_mut().zip(cache.h.data()).zip(a.data()) {
        *g += two_l * (hv - av);
    }
    let chans: Vec<Vec<f64>> = (0..c)
        .map(|ch| {
            let mut out = vec![0.0; p.op.source_len()];
            p.op.adjoint_add(gh.data(), ld, ch * t, &mut out);
            out
        })
        .collect();
    ae.input = gh;
    Ok(Gradients {
        z: DenseTensor::from_parts(p.x_shape.clone(), interleave(&chans)),
        ae,
        color,
    })
}

/// Single-shot loss evaluation for a problem embedding all modes of `Z`.
pub fn compute_losses(
    z: &DenseTensor,
    params: &ModelParams,
    y: &DenseTensor,
    f: &Degradation,
    cfg: &SolverConfig,
    noise: &Matrix,
) -> Result<(Losses, Cache)> {
    let problem = Arc::new(Problem::new(y, f, &cfg.tau, cfg.rec_scaling)?);
    problem.losses(z, params, noise)
}

fn split_channels(data: &[f64], c: usize) -> Vec<Vec<f64>> {
    if c == 1 {
        return vec![data.to_vec()];
    }
    (0..c).map(|ch| data.iter().skip(ch).step_by(c).copied().collect()).collect()
}

fn interleave(chans: &[Vec<f64>]) -> Vec<f64> {
    let c = chans.len();
    if c == 1 {
        return chans[0].clone();
    }
    let n = chans[0].len();
    let mut out = vec![0.0; n * c];
    for (ch, v) in chans.iter().enumerate() {
        for (i, &x) in v.iter().enumerate() {
            out[i * c + ch] = x;
        }
    }
    out
}

/// Derives independent sub-seeds from the run seed.
fn sub_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn initial_latent(problem: &Problem, init: ZInit, seed: u64) -> Result<DenseTensor> {
    let y = problem.observation();
    let shape = problem.x_shape().to_vec();
    match init {
        ZInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 3));
            let n: usize = shape.iter().product();
            Ok(DenseTensor::from_parts(shape, (0..n).map(|_| rng.random::<f64>()).collect()))
        }
        ZInit::Observed => match problem.degradation() {
            Degradation::Mask(m) => {
                let mean = m.mean_of_observed(y);
                Ok(DenseTensor::from_parts(
                    shape,
                    y.data()
                        .iter()
                        .zip(m.observed())
                        .map(|(&v, &o)| if o { v } else { mean })
                        .collect(),
                ))
            }
            f @ Degradation::Downsample { .. } => {
                let num = f.adjoint(y)?;
                let den = f.adjoint(&DenseTensor::filled(y.shape(), 1.0))?;
                Ok(DenseTensor::from_parts(
                    shape,
                    num.data()
                        .iter()
                        .zip(den.data())
                        .map(|(n, d)| if d.abs() > 1e-12 { n / d } else { 0.0 })
                        .collect(),
                ))
            }
            _ => Ok(y.clone()),
        },
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub iter: usize,
    pub psnr: f64,
    pub output: DenseTensor,
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// Noise-free output at termination.
    pub output: DenseTensor,
    pub trace: Vec<TraceRecord>,
    /// Evaluation with the highest PSNR against the reference.
    pub best: Option<Checkpoint>,
    /// First iteration whose evaluation reached `stop_psnr`.
    pub reached: Option<usize>,
    pub iters: usize,
    pub z: DenseTensor,
    pub params: ModelParams,
    pub lambda: f64,
}

pub type CheckpointFn<'a> = dyn FnMut(usize, &DenseTensor, &ModelParams) -> Result<()> + 'a;

/// Optimizer state for one run.
pub struct Solver {
    problem: Arc<Problem>,
    cfg: SolverConfig,
    z: DenseTensor,
    params: ModelParams,
    adam_z: AdamState,
    adam_ae: MlpAdam,
    adam_color: Option<AdamState>,
    noise: NoiseStream,
    lambda: f64,
    iter: usize,
}

impl Solver {
    /// Initializes `Z` and the auto-encoder from `cfg`; the color transform,
    /// if any, starts at the identity.
    pub fn new(problem: Problem, cfg: &SolverConfig, with_color: bool) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.layer_dims();
        let ae = init_params(&dims, cfg.ae_mode, sub_seed(cfg.seed, 1))?;
        let color = with_color.then(|| ColorTransform::identity(problem.channels()));
        let z = initial_latent(&problem, cfg.z_init, cfg.seed)?;
        Self::with_state(problem, cfg, z, ModelParams { ae, color })
    }

    pub fn with_state(problem: Problem, cfg: &SolverConfig, z: DenseTensor, params: ModelParams) -> Result<Self> {
        cfg.validate()?;
        problem.check_params(&z, &params)?;
        let adam_z = AdamState::new(z.len(), cfg.lr0);
        let adam_ae = MlpAdam::new(&params.ae, cfg.lr0);
        let adam_color = params.color.as_ref().map(|c| AdamState::new(c.flatten().len(), cfg.lr0));
        Ok(Self {
            problem: Arc::new(problem),
            cfg: cfg.clone(),
            z,
            params,
            adam_z,
            adam_ae,
            adam_color,
            noise: NoiseStream::new(sub_seed(cfg.seed, 2)),
            lambda: cfg.lambda0,
            iter: 0,
        })
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn latent(&self) -> &DenseTensor {
        &self.z
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn output(&self) -> Result<DenseTensor> {
        self.problem.output(&self.z, &self.params)
    }

    /// One iteration; returns its trace record without a PSNR entry.
    pub fn step(&mut self) -> Result<TraceRecord> {
        let (losses, cache, lr) = self.evaluate()?;
        self.apply(&cache, lr)?;
        Ok(self.record(losses, lr))
    }

    fn evaluate(&mut self) -> Result<(Losses, Cache, f64)> {
        let lr = lr_schedule(self.iter, &self.cfg);
        let noise = self
            .noise
            .sample(self.problem.embed_rows(), self.problem.embed_cols(), self.cfg.sigma);
        let (losses, cache) = self.problem.losses(&self.z, &self.params, &noise)?;
        Ok((losses, cache, lr))
    }

    fn apply(&mut self, cache: &Cache, lr: f64) -> Result<()> {
        let g = backward_total(cache, self.lambda)?;
        self.adam_z.lr = lr;
        self.adam_z.step(self.z.data_mut(), g.z.data())?;
        self.adam_ae.set_lr(lr);
        self.adam_ae.step(&mut self.params.ae, &g.ae)?;
        if let (Some(state), Some(ct), Some(gc)) = (&mut self.adam_color, &mut self.params.color, &g.color) {
            state.lr = lr;
            let mut flat = ct.flatten();
            state.step(&mut flat, &gc.flatten())?;
            ct.unflatten(&flat);
        }
        Ok(())
    }

    fn record(&mut self, losses: Losses, lr: f64) -> TraceRecord {
        let rec = TraceRecord {
            iter: self.iter,
            l_rec: losses.l_rec,
            l_ae: losses.l_ae,
            lambda: self.lambda,
            lr,
            psnr: None,
        };
        self.iter += 1;
        if self.iter % self.cfg.lambda_cadence == 0 {
            self.lambda = lambda_step(&self.cfg, self.lambda, losses);
        }
        rec
    }

    /// Runs until `max_iters` (or `stop_psnr`). With a reference, every
    /// `eval_cadence`-th iteration scores the noise-free output.
    pub fn run(mut self, reference: Option<&DenseTensor>, mut checkpoint: Option<&mut CheckpointFn<'_>>) -> Result<Reconstruction> {
        if let Some(r) = reference {
            if r.shape() != self.problem.x_shape() {
                return Err(Error::mismatch(format!(
                    "reference {:?} vs output {:?}",
                    r.shape(),
                    self.problem.x_shape()
                )));
            }
        }
        let mut trace = Vec::with_capacity(self.cfg.max_iters);
        let mut best: Option<Checkpoint> = None;
        let mut reached = None;
        while self.iter < self.cfg.max_iters {
            let it = self.iter;
            let (losses, cache, lr) = self.evaluate()?;
            if !(losses.l_rec.is_finite() && losses.l_ae.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    iter: it,
                    l_rec: losses.l_rec,
                    l_ae: losses.l_ae,
                    trace,
                });
            }
            let mut score = None;
            if let Some(r) = reference {
                if it % self.cfg.eval_cadence == 0 || it + 1 == self.cfg.max_iters {
                    let out = self.output()?;
                    let p = psnr(&out, r, 1.0)?;
                    score = Some(p);
                    if best.as_ref().is_none_or(|b| p > b.psnr) {
                        best = Some(Checkpoint { iter: it, psnr: p, output: out });
                    }
                    if reached.is_none() && self.cfg.stop_psnr.is_some_and(|s| p >= s) {
                        reached = Some(it);
                    }
                }
            }
            if reached.is_some() {
                let mut rec = self.record(losses, lr);
                rec.psnr = score;
                trace.push(rec);
                break;
            }
            self.apply(&cache, lr)?;
            let mut rec = self.record(losses, lr);
            rec.psnr = score;
            trace.push(rec);
            if let Some(cb) = checkpoint.as_deref_mut() {
                if self.cfg.checkpoint_cadence > 0 && self.iter % self.cfg.checkpoint_cadence == 0 {
                    cb(self.iter, &self.z, &self.params)?;
                }
            }
        }
        let output = self.output()?;
        Ok(Reconstruction {
            output,
            trace,
            best,
            reached,
            iters: self.iter,
            z: self.z,
            params: self.params,
            lambda: self.lambda,
        })
    }
}

/// Full reconstruction of `X` from `Y = F(X)`, embedding all modes jointly.
pub fn reconstruct(y: &DenseTensor, f: &Degradation, cfg: &SolverConfig, reference: Option<&DenseTensor>) -> Result<Reconstruction> {
    let problem = Problem::new(y, f, &cfg.tau, cfg.rec_scaling)?;
    Solver::new(problem, cfg, false)?.run(reference, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::{Activation, Layer};
    use crate::degradation::{make_random_mask, Mask};
    use crate::embedding::duplication_matrix;
    use crate::tensor::{fold_group, mode_n_product, reflection_pad, unfold_group};

    fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::from_fn(shape, |_| rng.random_range(lo..hi)).unwrap()
    }

    fn params_for(cfg: &SolverConfig, seed: u64) -> ModelParams {
        ModelParams {
            ae: init_params(&cfg.layer_dims(), cfg.ae_mode, seed).unwrap(),
            color: None,
        }
    }

    fn small_cfg() -> SolverConfig {
        let mut cfg = SolverConfig::new(EmbedShape::uniform(2, 2).unwrap(), 2, 0.1);
        cfg.hidden_factor = 2;
        cfg
    }

    fn split_shape(shape: &[usize], tau: &[usize]) -> Vec<usize> {
        shape.iter().zip(tau).flat_map(|(&i, &t)| [i + t - 1, t]).collect()
    }

    /// `H` through explicit duplication matrices and an unfolding.
    fn explicit_hankel(x: &DenseTensor, tau: &[usize]) -> Matrix {
        let t = EmbedShape::new(tau.to_vec()).unwrap();
        let mut y = reflection_pad(x, &t).unwrap();
        for (n, (&i, &tn)) in x.shape().iter().zip(tau).enumerate() {
            y = mode_n_product(&y, &duplication_matrix(i, tn).unwrap(), n).unwrap();
        }
        let y = y.reshape(split_shape(x.shape(), tau)).unwrap();
        unfold_group(&y, &[1, 3], &[0, 2]).unwrap()
    }

    /// `H† = trim ∘ (SᵀS)⁻¹Sᵀ ∘ fold` with every factor built explicitly.
    fn explicit_pinv(a: &Matrix, shape: &[usize], tau: &[usize]) -> DenseTensor {
        let folded = fold_group(a, &[1, 3], &[0, 2], &split_shape(shape, tau)).unwrap();
        let windows: Vec<usize> = shape.iter().zip(tau).map(|(i, t)| (i + t - 1) * t).collect();
        let mut y = folded.reshape(windows).unwrap();
        let mut counts = Vec::new();
        for (n, (&i, &tn)) in shape.iter().zip(tau).enumerate() {
            let s = duplication_matrix(i, tn).unwrap();
            y = mode_n_product(&y, &s.transpose(), n).unwrap();
            counts.push(s.transpose().matmul(&s).unwrap());
        }
        let y = DenseTensor::from_fn(y.shape(), |idx| {
            let c: f64 = idx.iter().enumerate().map(|(n, &k)| counts[n].get(k, k)).product();
            y.get(idx) / c
        })
        .unwrap();
        let t = EmbedShape::new(tau.to_vec()).unwrap();
        crate::tensor::trim(&y, &t).unwrap()
    }

    #[test]
    fn explicit_pinv_is_left_inverse() {
        let x = rand_tensor(&[5, 6], 1, -1.0, 1.0);
        let back = explicit_pinv(&explicit_hankel(&x, &[2, 3]), &[5, 6], &[2, 3]);
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn schedules() {
        assert_eq!(lambda_update(5.0, 0.5, 1.0), 5.5);
        assert_eq!(lambda_update(5.0, 1.0, 0.5), 4.95);
        let mut l = 5.0;
        for _ in 0..3 {
            let next = lambda_update(l, 1.0, 1.0);
            assert_eq!(next, l * 0.99);
            l = next;
        }
        let cfg = small_cfg();
        for it in 0..100 {
            assert_eq!(lr_schedule(it, &cfg), 0.01);
        }
        assert!((lr_schedule(100, &cfg) - 0.0098).abs() < 1e-15);
        assert!((lr_schedule(250, &cfg) - 0.009604).abs() < 1e-15);
    }

    #[test]
    fn cap_mode_only_raises_above_ceiling() {
        let mut cfg = small_cfg();
        cfg.lambda_mode = LambdaMode::Cap { ceiling: 1.0 };
        let hi = Losses { l_rec: 0.0, l_ae: 2.0 };
        let lo = Losses { l_rec: 5.0, l_ae: 0.5 };
        assert_eq!(lambda_step(&cfg, 2.0, hi), 2.0 * 1.1);
        assert_eq!(lambda_step(&cfg, 2.0, lo), 2.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        assert!(cfg.validate().is_ok());
        cfg.lambda_down = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.r = 4;
        assert!(cfg.validate().is_ok());
        cfg.r = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.lr0 = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn identity_fixpoint_has_zero_losses() {
        let tau = EmbedShape::new(vec![2, 3]).unwrap();
        let d = tau.window_volume();
        let layer = Layer {
            weight: Matrix::identity(d),
            bias: vec![0.0; d],
            activation: Activation::Identity,
        };
        let layers = vec![layer.clone(), layer];
        let params = ModelParams {
            ae: MlpParams::from_layers(layers).unwrap(),
            color: None,
        };
        let mut cfg = SolverConfig::new(tau, 1, 0.0);
        cfg.ae_mode = AeMode::Linear;
        let z = rand_tensor(&[5, 6], 1, 0.0, 1.0);
        let t = cfg.tau.num_windows(z.shape());
        let (l, _) = compute_losses(&z, &params, &z, &Degradation::Identity, &cfg, &Matrix::zeros(d, t)).unwrap();
        assert!(l.l_rec < 1e-24 && l.l_ae < 1e-24, "{l:?}");
    }

    #[test]
    fn zero_autoencoder_losses() {
        let cfg = small_cfg();
        let params = ModelParams {
            ae: params_for(&cfg, 1).ae.zeroed(),
            color: None,
        };
        let z = rand_tensor(&[5, 4], 2, 0.0, 1.0);
        let y = rand_tensor(&[5, 4], 3, 0.0, 1.0);
        let noise = NoiseStream::new(4).sample(4, 30, 0.1);
        let (l, cache) = compute_losses(&z, &params, &y, &Degradation::Identity, &cfg, &noise).unwrap();
        assert!((l.l_ae - cache.hankel().frobenius_sq()).abs() < 1e-12);
        assert!((l.l_rec - y.norm_sq() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn mean_scaling_averages_both_losses() {
        let mut cfg = small_cfg();
        let params = params_for(&cfg, 1);
        let z = rand_tensor(&[5, 4], 2, 0.0, 1.0);
        let y = rand_tensor(&[5, 4], 3, 0.0, 1.0);
        let mask = crate::degradation::make_random_mask(&[5, 4], 0.5, 9).unwrap();
        let f = Degradation::Mask(mask.clone());
        let noise = NoiseStream::new(4).sample(4, 30, 0.1);
        let lambda = 0.7;
        cfg.rec_scaling = RecScaling::Unscaled;
        let (raw, cache_raw) = compute_losses(&z, &params, &y, &f, &cfg, &noise).unwrap();
        cfg.rec_scaling = RecScaling::Mean;
        let (mean, cache_mean) = compute_losses(&z, &params, &y, &f, &cfg, &noise).unwrap();
        let (n, dt) = (mask.observed_count() as f64, 4.0 * 30.0);
        assert!((mean.l_rec - raw.l_rec / n).abs() < 1e-12);
        assert!((mean.l_ae - raw.l_ae / dt).abs() < 1e-12);
        // (1/N)·(‖R‖² + λ·N/(DT)·‖H − A‖²)
        let g_raw = backward_total(&cache_raw, lambda * n / dt).unwrap();
        let g_mean = backward_total(&cache_mean, lambda).unwrap();
        for (a, b) in g_mean.z.data().iter().zip(g_raw.z.data()) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_match_explicit_matrix_oracle() {
        let mut cfg = small_cfg();
        cfg.tau = EmbedShape::new(vec![2, 3]).unwrap();
        let params = params_for(&cfg, 5);
        let z = rand_tensor(&[5, 6], 6, 0.0, 1.0);
        let y = rand_tensor(&[5, 6], 7, 0.0, 1.0);
        let f = Degradation::Mask(make_random_mask(&[5, 6], 0.3, 2).unwrap());
        let h = explicit_hankel(&z, &[2, 3]);
        let noise = NoiseStream::new(8).sample(h.rows(), h.cols(), 0.1);
        let (l, _) = compute_losses(&z, &params, &y, &f, &cfg, &noise).unwrap();

        let mut hn = h.clone();
        for (v, e) in hn.data_mut().iter_mut().zip(noise.data()) {
            *v += e;
        }
        let a = params.ae.apply(&hn).unwrap();
        let l_ae: f64 = h.data().iter().zip(a.data()).map(|(p, q)| (p - q).powi(2)).sum();
        let x = explicit_pinv(&a, &[5, 6], &[2, 3]);
        let l_rec: f64 = f
            .apply(&x)
            .unwrap()
            .data()
            .iter()
            .zip(f.apply(&y).unwrap().data())
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            / 6.0;
        assert!((l.l_ae - l_ae).abs() <= 1e-12 * l_ae.max(1.0), "{} vs {l_ae}", l.l_ae);
        assert!((l.l_rec - l_rec).abs() <= 1e-12 * l_rec.max(1.0), "{} vs {l_rec}", l.l_rec);
    }

    #[test]
    fn masked_loss_ignores_missing_values() {
        let cfg = small_cfg();
        let params = params_for(&cfg, 1);
        let mask = make_random_mask(&[6, 6], 0.5, 3).unwrap();
        let f = Degradation::Mask(mask.clone());
        let z = rand_tensor(&[6, 6], 1, 0.0, 1.0);
        let y = f.apply(&rand_tensor(&[6, 6], 2, 0.0, 1.0)).unwrap();
        let mut y2 = y.clone();
        for (v, &o) in y2.data_mut().iter_mut().zip(mask.observed()) {
            if !o {
                *v = 17.0;
            }
        }
        let noise = NoiseStream::new(1).sample(4, 49, 0.1);
        let a = compute_losses(&z, &params, &y, &f, &cfg, &noise).unwrap().0;
        let b = compute_losses(&z, &params, &y2, &f, &cfg, &noise).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_is_linear_in_lambda() {
        let cfg = small_cfg();
        let params = params_for(&cfg, 1);
        let z = rand_tensor(&[6, 6], 1, 0.0, 1.0);
        let y = rand_tensor(&[6, 6], 2, 0.0, 1.0);
        let noise = NoiseStream::new(1).sample(4, 49, 0.1);
        let (_, cache) = compute_losses(&z, &params, &y, &Degradation::Identity, &cfg, &noise).unwrap();
        let g0 = backward_total(&cache, 0.0).unwrap();
        let g1 = backward_total(&cache, 1.0).unwrap();
        let g3 = backward_total(&cache, 3.0).unwrap();
        for ((a, b), c) in g0.z.data().iter().zip(g1.z.data()).zip(g3.z.data()) {
            assert!((c - (a + 3.0 * (b - a))).abs() < 1e-12);
        }
        let (w0, w1, w3) = (&g0.ae.layers[0].weight, &g1.ae.layers[0].weight, &g3.ae.layers[0].weight);
        for ((a, b), c) in w0.data().iter().zip(w1.data()).zip(w3.data()) {
            assert!((c - (a + 3.0 * (b - a))).abs() < 1e-12);
        }
    }

    fn total_loss(problem: &Arc<Problem>, z: &DenseTensor, p: &ModelParams, noise: &Matrix, lambda: f64) -> f64 {
        problem.losses(z, p, noise).unwrap().0.total(lambda)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn full_pipeline_gradient_matches_central_differences() {
        let cfg = small_cfg();
        let lambda = 0.7;
        let fs = [
            Degradation::Identity,
            Degradation::Mask(make_random_mask(&[6, 6], 0.4, 9).unwrap()),
            Degradation::gaussian_blur(0.8, 1, 2).unwrap(),
        ];
        for f in fs {
            let y = rand_tensor(&[6, 6], 3, 0.0, 1.0);
            let problem = Arc::new(Problem::new(&y, &f, &cfg.tau, RecScaling::PerWindow).unwrap());
            let z = rand_tensor(&[6, 6], 4, 0.0, 1.0);
            let params = params_for(&cfg, 5);
            let noise = NoiseStream::new(6).sample(4, 49, 0.1);
            let (_, cache) = problem.losses(&z, &params, &noise).unwrap();
            let g = backward_total(&cache, lambda).unwrap();
            let eps = 1e-6;
            for i in [0, 7, 20, 35] {
                let mut zp = z.clone();
                zp.data_mut()[i] += eps;
                let mut zm = z.clone();
                zm.data_mut()[i] -= eps;
                let fd = (total_loss(&problem, &zp, &params, &noise, lambda) - total_loss(&problem, &zm, &params, &noise, lambda)) / (2.0 * eps);
                assert!(rel_err(fd, g.z.data()[i]) <= 1e-5, "{f:?} z[{i}]: {fd} vs {}", g.z.data()[i]);
            }
            for (l, k) in [(0, 3), (1, 5), (2, 1), (3, 6)] {
                let mut pp = params.clone();
                pp.ae.layers_mut()[l].weight.data_mut()[k] += eps;
                let mut pm = params.clone();
                pm.ae.layers_mut()[l].weight.data_mut()[k] -= eps;
                let fd = (total_loss(&problem, &z, &pp, &noise, lambda) - total_loss(&problem, &z, &pm, &noise, lambda)) / (2.0 * eps);
                let an = g.ae.layers[l].weight.data()[k];
                assert!(rel_err(fd, an) <= 1e-5, "{f:?} w{l}[{k}]: {fd} vs {an}");
            }
            let mut pp = params.clone();
            pp.ae.layers_mut()[1].bias[0] += eps;
            let mut pm = params.clone();
            pm.ae.layers_mut()[1].bias[0] -= eps;
            let fd = (total_loss(&problem, &z, &pp, &noise, lambda) - total_loss(&problem, &z, &pm, &noise, lambda)) / (2.0 * eps);
            assert!(rel_err(fd, g.ae.layers[1].bias[0]) <= 1e-5);
        }
    }

    #[test]
    fn reconstruction_descends_and_is_deterministic() {
        let mut cfg = SolverConfig::new(EmbedShape::uniform(3, 2).unwrap(), 3, 0.05);
        cfg.hidden_factor = 4;
        cfg.max_iters = 200;
        cfg.z_init = ZInit::Random;
        cfg.seed = 11;
        let y = DenseTensor::from_fn(&[16, 16], |i| 0.5 + 0.4 * ((i[0] as f64) * 0.4).sin() * ((i[1] as f64) * 0.3).cos()).unwrap();
        let a = reconstruct(&y, &Degradation::Identity, &cfg, None).unwrap();
        assert_eq!(a.trace.len(), 200);
        assert!(a.trace.last().unwrap().l_rec < a.trace[0].l_rec);
        let b = reconstruct(&y, &Degradation::Identity, &cfg, None).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.output, b.output);
        // final output is the noise-free generator
        let problem = Problem::new(&y, &Degradation::Identity, &cfg.tau, cfg.rec_scaling).unwrap();
        assert_eq!(problem.output(&a.z, &a.params).unwrap(), a.output);
        assert!(a.trace.iter().all(|r| r.lambda > 0.0));
    }

    #[test]
    fn reference_tracking_and_early_stop() {
        let mut cfg = SolverConfig::new(EmbedShape::uniform(2, 2).unwrap(), 2, 0.0);
        cfg.hidden_factor = 2;
        cfg.max_iters = 50;
        cfg.eval_cadence = 5;
        let y = rand_tensor(&[8, 8], 1, 0.0, 1.0);
        let full = reconstruct(&y, &Degradation::Identity, &cfg, Some(&y)).unwrap();
        let scored: Vec<_> = full.trace.iter().filter(|r| r.psnr.is_some()).map(|r| r.iter).collect();
        assert_eq!(scored, vec![0, 5, 10, 15, 20, 25, 30, 35, 40, 45, 49]);
        let best = full.best.unwrap();
        let max = full.trace.iter().filter_map(|r| r.psnr).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best.psnr, max);

        cfg.stop_psnr = Some(f64::NEG_INFINITY);
        let stopped = reconstruct(&y, &Degradation::Identity, &cfg, Some(&y)).unwrap();
        assert_eq!(stopped.reached, Some(0));
        assert_eq!(stopped.trace.len(), 1);
    }

    #[test]
    fn checkpoint_callback_cadence() {
        let mut cfg = small_cfg();
        cfg.max_iters = 25;
        cfg.checkpoint_cadence = 10;
        let y = rand_tensor(&[6, 6], 1, 0.0, 1.0);
        let problem = Problem::new(&y, &Degradation::Identity, &cfg.tau, cfg.rec_scaling).unwrap();
        let mut seen = Vec::new();
        let mut cb = |it: usize, _: &DenseTensor, _: &ModelParams| {
            seen.push(it);
            Ok(())
        };
        Solver::new(problem, &cfg, false).unwrap().run(None, Some(&mut cb)).unwrap();
        assert_eq!(seen, vec![10, 20]);
    }

    #[test]
    fn observed_initialization() {
        let mask = Mask::new(vec![2, 2], vec![true, false, true, true]).unwrap();
        let y = DenseTensor::new(vec![2, 2], vec![0.2, 0.0, 0.4, 0.6]).unwrap();
        let f = Degradation::Mask(mask);
        let p = Problem::new(&y, &f, &EmbedShape::uniform(1, 2).unwrap(), RecScaling::PerWindow).unwrap();
        let z = initial_latent(&p, ZInit::Observed, 0).unwrap();
        assert!((z.data()[1] - 0.4).abs() < 1e-15);

        let f = Degradation::lanczos_downsample(2, 2).unwrap();
        let y = DenseTensor::filled(&[4, 4], 0.3);
        let p = Problem::new(&y, &f, &EmbedShape::uniform(2, 2).unwrap(), RecScaling::PerWindow).unwrap();
        let z = initial_latent(&p, ZInit::Observed, 0).unwrap();
        assert_eq!(z.shape(), &[8, 8]);
        assert!(z.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn channel_split_roundtrip() {
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let ch = split_channels(&data, 3);
        assert_eq!(ch[1], vec![1.0, 4.0, 7.0, 10.0]);
        assert_eq!(interleave(&ch), data);
    }
}
