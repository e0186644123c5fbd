//! Observation operators `F` (masking, down-sampling, blur, identity) with
//! exact adjoints. Blur and down-sampling use reflect boundaries, the same
//! convention as the embedding's padding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{correlate_valid, correlate_valid_adjoint, pad_reflect, pad_reflect_adjoint, DenseTensor};

const KERNEL_SUM_TOL: f64 = 1e-9;

/// Boolean support set `Ω`: `true` marks an observed entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    observed: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, observed: Vec<bool>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != observed.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("mask with {} entries", observed.len()),
            });
        }
        Ok(Self { shape, observed })
    }

    pub fn full(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            observed: vec![true; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Replicates a spatial mask over a trailing channel mode, so a missing
    /// pixel is missing in every channel.
    pub fn broadcast_channels(&self, channels: usize) -> Self {
        let mut shape = self.shape.clone();
        shape.push(channels);
        let observed = self
            .observed
            .iter()
            .flat_map(|&o| std::iter::repeat_n(o, channels))
            .collect();
        Self { shape, observed }
    }

    /// 0/1 indicator tensor.
    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::from_parts(
            self.shape.clone(),
            self.observed.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Entries at or above `threshold` count as observed.
    pub fn from_tensor(t: &DenseTensor, threshold: f64) -> Self {
        Self {
            shape: t.shape().to_vec(),
            observed: t.data().iter().map(|&v| v >= threshold).collect(),
        }
    }

    pub fn mean_of_observed(&self, x: &DenseTensor) -> f64 {
        let (sum, n) = x
            .data()
            .iter()
            .zip(&self.observed)
            .filter(|(_, &o)| o)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Degradation {
    Identity,
    /// Projection `P_Ω`: missing entries are set to zero.
    Mask(Mask),
    /// Per-mode correlation with a 1-D kernel followed by stride-`s`
    /// subsampling; a factor of 1 leaves the mode untouched.
    Downsample { factors: Vec<usize>, kernel: Vec<f64> },
    /// Same-size N-way correlation; the kernel rank must equal the input rank.
    Blur { kernel: DenseTensor },
}

fn check_normalized(sum: f64) -> Result<()> {
    if (sum - 1.0).abs() > KERNEL_SUM_TOL {
        return Err(Error::KernelNotNormalized { sum });
    }
    Ok(())
}

/// Reflect an index in `[-(n-1), 2(n-1)]` back into `[0, n)` without repeating the edge.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let last = n as isize - 1;
    let i = i.abs();
    (if i > last { 2 * last - i } else { i }) as usize
}

impl Degradation {
    pub fn downsample(factors: Vec<usize>, kernel: Vec<f64>) -> Result<Self> {
        if factors.is_empty() || factors.contains(&0) {
            return Err(Error::param(format!("down-sampling factors must be ≥ 1, got {factors:?}")));
        }
        if kernel.len() % 2 == 0 || kernel.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("down-sampling kernel must have odd length and finite taps"));
        }
        check_normalized(kernel.iter().sum())?;
        Ok(Degradation::Downsample { factors, kernel })
    }

    /// Lanczos2 down-sampling by `factor` along the first two modes of an
    /// `ndim`-way tensor.
    pub fn lanczos_downsample(factor: usize, ndim: usize) -> Result<Self> {
        let kernel = make_lanczos2_kernel(factor)?;
        let factors = (0..ndim).map(|n| if n < 2 { factor } else { 1 }).collect();
        Self::downsample(factors, kernel)
    }

    pub fn blur(kernel: DenseTensor) -> Result<Self> {
        if kernel.shape().iter().any(|&k| k % 2 == 0) {
            return Err(Error::param(format!("blur kernel sides must be odd, got {:?}", kernel.shape())));
        }
        check_normalized(kernel.data().iter().sum())?;
        Ok(Degradation::Blur { kernel })
    }

    /// Gaussian blur over the first two modes of an `ndim`-way tensor.
    pub fn gaussian_blur(sigma: f64, radius: usize, ndim: usize) -> Result<Self> {
        let k2 = make_gaussian_kernel(sigma, radius, 2.min(ndim))?;
        let mut shape = k2.shape().to_vec();
        shape.resize(ndim, 1);
        Self::blur(k2.reshape(shape)?)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Degradation::Identity => Ok(input.to_vec()),
            Degradation::Mask(m) => {
                if m.shape() != input {
                    return Err(Error::mismatch(format!(
                        "mask shape {:?} vs tensor shape {input:?}",
                        m.shape()
                    )));
                }
                Ok(input.to_vec())
            }
            Degradation::Downsample { factors, kernel } => {
                if factors.len() != input.len() {
                    return Err(Error::mismatch(format!("{} factors for a {}-way tensor", factors.len(), input.len())));
                }
                let radius = kernel.len() / 2;
                input
                    .iter()
                    .zip(factors)
                    .enumerate()
                    .map(|(mode, (&len, &s))| {
                        if s == 1 {
                            return Ok(len);
                        }
                        if len % s != 0 {
                            return Err(Error::mismatch(format!(
                                "mode {mode} of length {len} is not divisible by factor {s}"
                            )));
                        }
                        if radius > len - 1 {
                            return Err(Error::WindowTooLarge {
                                mode,
                                tau: kernel.len(),
                                len,
                            });
                        }
                        Ok(len / s)
                    })
                    .collect()
            }
            Degradation::Blur { kernel } => {
                if kernel.ndim() != input.len() {
                    return Err(Error::mismatch(format!(
                        "{}-way blur kernel for a {}-way tensor",
                        kernel.ndim(),
                        input.len()
                    )));
                }
                for (mode, (&k, &len)) in kernel.shape().iter().zip(input).enumerate() {
                    if k / 2 > len - 1 {
                        return Err(Error::WindowTooLarge { mode, tau: k, len });
                    }
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Shape of the tensors this operator accepts, given an observation shape.
    pub fn input_shape(&self, output: &[usize]) -> Vec<usize> {
        match self {
            Degradation::Downsample { factors, .. } => output.iter().zip(factors).map(|(j, s)| j * s).collect(),
            _ => output.to_vec(),
        }
    }

    pub fn apply(&self, x: &DenseTensor) -> Result<DenseTensor> {
        self.output_shape(x.shape())?;
        match self {
            Degradation::Identity => Ok(x.clone()),
            Degradation::Mask(m) => Ok(DenseTensor::from_parts(
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .zip(m.observed())
                    .map(|(&v, &o)| if o { v } else { 0.0 })
                    .collect(),
            )),
            Degradation::Downsample { factors, kernel } => {
                let mut cur = x.clone();
                for (mode, &s) in factors.iter().enumerate() {
                    if s > 1 {
                        cur = along_mode(&cur, mode, cur.shape()[mode] / s, |src, dst| {
                            filter_subsample(src, dst, kernel, s)
                        });
                    }
                }
                Ok(cur)
            }
            Degradation::Blur { kernel } => {
                let widths = blur_widths(kernel);
                correlate_valid(&pad_reflect(x, &widths)?, kernel)
            }
        }
    }

    pub fn adjoint(&self, y: &DenseTensor) -> Result<DenseTensor> {
        let input = self.input_shape(y.shape());
        let expected = self.output_shape(&input)?;
        if expected.as_slice() != y.shape() {
            return Err(Error::mismatch(format!("{:?} is not in the operator's range", y.shape())));
        }
        match self {
            Degradation::Identity | Degradation::Mask(_) => self.apply(y),
            Degradation::Downsample { factors, kernel } => {
                let mut cur = y.clone();
                for (mode, &s) in factors.iter().enumerate().rev() {
                    if s > 1 {
                        cur = along_mode(&cur, mode, cur.shape()[mode] * s, |src, dst| {
                            filter_subsample_adjoint(src, dst, kernel, s)
                        });
                    }
                }
                Ok(cur)
            }
            Degradation::Blur { kernel } => {
                let widths = blur_widths(kernel);
                let padded: Vec<usize> = input.iter().zip(&widths).map(|(n, (b, a))| n + b + a).collect();
                let g = correlate_valid_adjoint(y, kernel, &padded)?;
                pad_reflect_adjoint(&g, &input, &widths)
            }
        }
    }
}

pub fn apply(f: &Degradation, x: &DenseTensor) -> Result<DenseTensor> {
    f.apply(x)
}

pub fn adjoint(f: &Degradation, y: &DenseTensor) -> Result<DenseTensor> {
    f.adjoint(y)
}

fn blur_widths(kernel: &DenseTensor) -> Vec<(usize, usize)> {
    kernel.shape().iter().map(|&k| (k / 2, k / 2)).collect()
}

/// Sampling phase of output `j`: input position `j·s + (s−1)/2`.
fn phase(s: usize) -> usize {
    (s - 1) / 2
}

fn filter_subsample(src: &[f64], dst: &mut [f64], kernel: &[f64], s: usize) {
    let n = src.len();
    let radius = (kernel.len() / 2) as isize;
    for (j, out) in dst.iter_mut().enumerate() {
        let c = (j * s + phase(s)) as isize;
        *out = kernel
            .iter()
            .enumerate()
            .map(|(k, &w)| w * src[reflect(c + k as isize - radius, n)])
            .sum();
    }
}

fn filter_subsample_adjoint(src: &[f64], dst: &mut [f64], kernel: &[f64], s: usize) {
    let n = dst.len();
    let radius = (kernel.len() / 2) as isize;
    dst.fill(0.0);
    for (j, &g) in src.iter().enumerate() {
        let c = (j * s + phase(s)) as isize;
        for (k, &w) in kernel.iter().enumerate() {
            dst[reflect(c + k as isize - radius, n)] += w * g;
        }
    }
}

/// Applies a line operator to every 1-D fiber along `mode`.
fn along_mode(x: &DenseTensor, mode: usize, out_len: usize, f: impl Fn(&[f64], &mut [f64])) -> DenseTensor {
    let shape = x.shape();
    let len = shape[mode];
    let outer: usize = shape[..mode].iter().product();
    let inner: usize = shape[mode + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[mode] = out_len;
    let mut out = vec![0.0; outer * out_len * inner];
    let mut line = vec![0.0; len];
    let mut res = vec![0.0; out_len];
    let data = x.data();
    for o in 0..outer {
        for i in 0..inner {
            for (k, v) in line.iter_mut().enumerate() {
                *v = data[(o * len + k) * inner + i];
            }
            f(&line, &mut res);
            for (k, &v) in res.iter().enumerate() {
                out[(o * out_len + k) * inner + i] = v;
            }
        }
    }
    DenseTensor::from_parts(out_shape, out)
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// `L(x) = sinc(x)·sinc(x/2)` for `|x| < 2`, zero outside.
pub fn lanczos2(x: f64) -> f64 {
    if x.abs() < 2.0 {
        sinc(x) * sinc(x / 2.0)
    } else {
        0.0
    }
}

/// Lanczos2 taps at `k/s` for `|k| ≤ 2s − 1` (`4s − 1` taps), normalized to sum 1.
pub fn make_lanczos2_kernel(factor: usize) -> Result<Vec<f64>> {
    if ![2, 4, 8].contains(&factor) {
        return Err(Error::InvalidFactor(factor));
    }
    let half = 2 * factor as isize - 1;
    let taps: Vec<f64> = (-half..=half).map(|k| lanczos2(k as f64 / factor as f64)).collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|v| v / sum).collect())
}

/// Separable Gaussian on a `(2·radius+1)^ndim` grid, normalized to sum 1.
pub fn make_gaussian_kernel(sigma: f64, radius: usize, ndim: usize) -> Result<DenseTensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("blur width must be positive, got {sigma}")));
    }
    if ndim == 0 {
        return Err(Error::param("kernel needs at least one mode"));
    }
    let r = radius as isize;
    let g: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = g.iter().sum();
    let g: Vec<f64> = g.into_iter().map(|v| v / sum).collect();
    DenseTensor::from_fn(&vec![2 * radius + 1; ndim], |idx| idx.iter().map(|&i| g[i]).product())
}

/// Uniformly random support with exactly `round((1−ρ)·size)` observed entries.
pub fn make_random_mask(shape: &[usize], missing_rate: f64, seed: u64) -> Result<Mask> {
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::param(format!("missing rate must lie in [0, 1), got {missing_rate}")));
    }
    let n: usize = shape.iter().product();
    if shape.is_empty() || n == 0 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "empty mask".into(),
        });
    }
    let keep = ((1.0 - missing_rate) * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut observed = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, keep) {
        observed[i] = true;
    }
    Mask::new(shape.to_vec(), observed)
}

/// Random pixel mask over the spatial modes, replicated over `channels`.
pub fn make_pixel_mask(spatial: &[usize], channels: usize, missing_rate: f64, seed: u64) -> Result<Mask> {
    Ok(make_random_mask(spatial, missing_rate, seed)?.broadcast_channels(channels))
}
