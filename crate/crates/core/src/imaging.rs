//! Color reconstruction with a shared patch manifold, and quality metrics.

use crate::autoencoder::MlpParams;
use crate::degradation::Degradation;
use crate::error::{Error, Result};
use crate::solver::{ColorTransform, ModelParams, Problem, Reconstruction, Solver, SolverConfig};
use crate::tensor::{DenseTensor, Matrix};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ColorPipelineParams {
    pub shared_ae: MlpParams,
    pub color_matrix: Matrix,
    pub color_bias: Vec<f64>,
}

impl ColorPipelineParams {
    pub fn new(shared_ae: MlpParams) -> Self {
        let ct = ColorTransform::identity(3);
        Self {
            shared_ae,
            color_matrix: ct.matrix,
            color_bias: ct.bias,
        }
    }

    pub fn from_model(p: &ModelParams) -> Option<Self> {
        p.color.as_ref().map(|c| Self {
            shared_ae: p.ae.clone(),
            color_matrix: c.matrix.clone(),
            color_bias: c.bias.clone(),
        })
    }

    pub fn into_model(self) -> ModelParams {
        ModelParams {
            ae: self.shared_ae,
            color: Some(ColorTransform {
                matrix: self.color_matrix,
                bias: self.color_bias,
            }),
        }
    }
}

/// `[B_1 … B_C]` for blocks of equal height.
pub fn concat_blocks(blocks: &[Matrix]) -> Result<Matrix> {
    let Some(first) = blocks.first() else {
        return Err(Error::mismatch("no blocks to concatenate"));
    };
    let (d, t) = first.shape();
    if blocks.iter().any(|b| b.shape() != (d, t)) {
        return Err(Error::mismatch("blocks differ in shape"));
    }
    let c = blocks.len();
    Ok(Matrix::from_fn(d, c * t, |i, j| blocks[j / t].get(i, j % t)))
}

/// Inverse of [`concat_blocks`].
pub fn split_blocks(m: &Matrix, count: usize) -> Result<Vec<Matrix>> {
    if count == 0 || m.cols() % count != 0 {
        return Err(Error::mismatch(format!("{} columns do not split into {count} blocks", m.cols())));
    }
    let t = m.cols() / count;
    Ok((0..count)
        .map(|b| Matrix::from_fn(m.rows(), t, |i, j| m.get(i, b * t + j)))
        .collect())
}

/// The color problem for an `H × W × 3` observation.
pub fn color_problem(y: &DenseTensor, f: &Degradation, cfg: &SolverConfig) -> Result<Problem> {
    if y.ndim() != 3 || y.shape()[2] != 3 {
        return Err(Error::mismatch(format!("expected an H×W×3 image, got {:?}", y.shape())));
    }
    if cfg.tau.ndim() != 2 {
        return Err(Error::mismatch("color reconstruction embeds the two spatial modes"));
    }
    Problem::per_channel(y, f, &cfg.tau, cfg.rec_scaling)
}

/// Reconstructs all three channels through one shared auto-encoder followed
/// by a trainable per-pixel color transform.
pub fn color_reconstruct(y: &DenseTensor, f: &Degradation, cfg: &SolverConfig, reference: Option<&DenseTensor>) -> Result<Reconstruction> {
    Solver::new(color_problem(y, f, cfg)?, cfg, true)?.run(reference, None)
}

pub fn mse(a: &DenseTensor, b: &DenseTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(peak² / MSE)`; `+∞` for identical inputs.
pub fn psnr(a: &DenseTensor, b: &DenseTensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::param(format!("peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = g.iter().enumerate().map(|(a, &c)| c * x[i * w + j + a]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = g.iter().enumerate().map(|(a, &c)| c * rows[(i + a) * ow + j]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let e_aa = filter_valid(&prod(a, a), h, w, &g);
    let e_bb = filter_valid(&prod(b, b), h, w, &g);
    let e_ab = filter_valid(&prod(a, b), h, w, &g);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let (maa, mbb, mab) = (ma * ma, mb * mb, ma * mb);
        let (saa, sbb, sab) = (e_aa[i] - maa, e_bb[i] - mbb, e_ab[i] - mab);
        let num = (2.0 * mab + SSIM_C1) * (2.0 * sab + SSIM_C2);
        let den = (maa + mbb + SSIM_C1) * (saa + sbb + SSIM_C2);
        total += num / den;
    }
    total / mu_a.len() as f64
}

/// Mean structural similarity over all valid 11×11 Gaussian windows; for
/// `H × W × C` inputs, the mean of the per-channel scores.
pub fn ssim(a: &DenseTensor, b: &DenseTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (h, w, c) = match *a.shape() {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return Err(Error::mismatch(format!("expected an image, got shape {:?}", a.shape()))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: format!("smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"),
        });
    }
    if c == 1 {
        return Ok(ssim_plane(a.data(), b.data(), h, w));
    }
    let mut total = 0.0;
    for ch in 0..c {
        total += ssim_plane(a.channel(ch).data(), b.channel(ch).data(), h, w);
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::{init_params, AeMode, NoiseStream};
    use crate::degradation::make_pixel_mask;
    use crate::embedding::mdt_forward;
    use crate::solver::{backward_total, RecScaling};
    use crate::tensor::EmbedShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn rand_tensor(shape: &[usize], seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::from_fn(shape, |_| rng.random::<f64>()).unwrap()
    }

    /// Direct evaluation of every window with explicit 2-D weights.
    fn ssim_oracle(a: &DenseTensor, b: &DenseTensor) -> f64 {
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let mut w2 = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in w2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / 4.5).exp();
                s += *v;
            }
        }
        let mut total = 0.0;
        let mut count = 0;
        for i0 in 0..=h - 11 {
            for j0 in 0..=w - 11 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, row) in w2.iter().enumerate() {
                    for (j, &wt) in row.iter().enumerate() {
                        let wt = wt / s;
                        let x = a.get(&[i0 + i, j0 + j]);
                        let y = b.get(&[i0 + i, j0 + j]);
                        ma += wt * x;
                        mb += wt * y;
                        aa += wt * x * x;
                        bb += wt * y * y;
                        ab += wt * x * y;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                total += (2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4) / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_cases() {
        let a = rand_tensor(&[8, 8], 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() <= 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let (a2, b2) = (a.map(|v| v * 255.0), b.map(|v| v * 255.0));
        assert!((psnr(&a2, &b2, 255.0).unwrap() - 20.0).abs() <= 1e-9);
        assert!(psnr(&a, &DenseTensor::zeros(&[8, 4]), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_oracle() {
        let a = rand_tensor(&[32, 32], 2);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        for seed in 0..4 {
            let a = rand_tensor(&[32, 32], 10 + seed);
            let b = rand_tensor(&[32, 32], 20 + seed);
            let s = ssim(&a, &b).unwrap();
            assert!((s - ssim_oracle(&a, &b)).abs() <= 1e-10);
            assert_eq!(s, ssim(&b, &a).unwrap());
        }
        assert!(ssim(&DenseTensor::zeros(&[10, 20]), &DenseTensor::zeros(&[10, 20])).is_err());
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_not_positive() {
        let a = DenseTensor::from_fn(&[16, 16], |i| ((i[0] + i[1]) % 2) as f64).unwrap();
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b).unwrap() <= 0.0);
    }

    #[test]
    fn ssim_channels_average() {
        let a = rand_tensor(&[12, 12, 3], 4);
        let b = rand_tensor(&[12, 12, 3], 5);
        let per: f64 = (0..3).map(|c| ssim(&a.channel(c), &b.channel(c)).unwrap()).sum::<f64>() / 3.0;
        assert!((ssim(&a, &b).unwrap() - per).abs() < 1e-15);
    }

    #[test]
    fn blocks_concatenate_along_columns() {
        let z = rand_tensor(&[6, 5, 3], 1);
        let tau = EmbedShape::new(vec![2, 3]).unwrap();
        let cfg = SolverConfig::new(tau.clone(), 2, 0.0);
        let p = color_problem(&z, &Degradation::Identity, &cfg).unwrap();
        let h = p.embed(&z);
        assert_eq!(h.shape(), (6, 3 * tau.num_windows(&[6, 5])));
        let blocks = split_blocks(&h, 3).unwrap();
        for (c, blk) in blocks.iter().enumerate() {
            assert_eq!(blk, mdt_forward(&z.channel(c), &tau).unwrap().values());
        }
        assert_eq!(concat_blocks(&blocks).unwrap(), h);
        assert!(p.unembed(&h).max_abs_diff(&z) < 1e-12);
        assert!(color_problem(&rand_tensor(&[6, 5, 2], 1), &Degradation::Identity, &cfg).is_err());
    }

    #[test]
    fn equal_channels_stay_equal() {
        let g = rand_tensor(&[10, 10], 3);
        let y = DenseTensor::stack_channels(&[g.clone(), g.clone(), g]).unwrap();
        let mut cfg = SolverConfig::new(EmbedShape::uniform(3, 2).unwrap(), 2, 0.0);
        cfg.hidden_factor = 2;
        cfg.max_iters = 30;
        let out = color_reconstruct(&y, &Degradation::Identity, &cfg, None).unwrap();
        // symmetric init and zero noise keep the channels equal up to summation order
        let (c0, c1, c2) = (out.output.channel(0), out.output.channel(1), out.output.channel(2));
        assert!(c0.max_abs_diff(&c1) < 1e-12);
        assert!(c0.max_abs_diff(&c2) < 1e-12);
    }

    #[test]
    fn color_matrix_gradient_matches_central_differences() {
        let mut cfg = SolverConfig::new(EmbedShape::uniform(2, 2).unwrap(), 2, 0.1);
        cfg.hidden_factor = 2;
        let y = rand_tensor(&[8, 8, 3], 1);
        let f = Degradation::Mask(make_pixel_mask(&[8, 8], 3, 0.3, 2).unwrap());
        let problem = Arc::new(color_problem(&y, &f, &cfg).unwrap());
        let mut params = ColorPipelineParams::new(init_params(&cfg.layer_dims(), AeMode::default(), 3).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for v in params.color_matrix.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
        for v in &mut params.color_bias {
            *v = rng.random_range(-0.1..0.1);
        }
        let params = params.into_model();
        let z = rand_tensor(&[8, 8, 3], 5);
        let noise = NoiseStream::new(6).sample(problem.embed_rows(), problem.embed_cols(), 0.1);
        let lambda = 1.3;
        let (_, cache) = problem.losses(&z, &params, &noise).unwrap();
        let g = backward_total(&cache, lambda).unwrap();
        let gc = g.color.unwrap();
        let total = |p: &ModelParams, z: &DenseTensor| problem.losses(z, p, &noise).unwrap().0.total(lambda);
        let eps = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        for k in 0..9 {
            let (mut pp, mut pm) = (params.clone(), params.clone());
            pp.color.as_mut().unwrap().matrix.data_mut()[k] += eps;
            pm.color.as_mut().unwrap().matrix.data_mut()[k] -= eps;
            let fd = (total(&pp, &z) - total(&pm, &z)) / (2.0 * eps);
            assert!(rel(fd, gc.matrix.data()[k]) <= 1e-5, "M[{k}]: {fd} vs {}", gc.matrix.data()[k]);
        }
        for k in 0..3 {
            let (mut pp, mut pm) = (params.clone(), params.clone());
            pp.color.as_mut().unwrap().bias[k] += eps;
            pm.color.as_mut().unwrap().bias[k] -= eps;
            let fd = (total(&pp, &z) - total(&pm, &z)) / (2.0 * eps);
            assert!(rel(fd, gc.bias[k]) <= 1e-5);
        }
        for i in [0, 50, 100, 191] {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp.data_mut()[i] += eps;
            zm.data_mut()[i] -= eps;
            let fd = (total(&params, &zp) - total(&params, &zm)) / (2.0 * eps);
            assert!(rel(fd, g.z.data()[i]) <= 1e-5);
        }
    }

    #[test]
    fn frozen_identity_color_reduces_to_grayscale_runs() {
        let cfg = {
            let mut c = SolverConfig::new(EmbedShape::uniform(2, 2).unwrap(), 2, 0.1);
            c.hidden_factor = 2;
            c
        };
        let y = rand_tensor(&[6, 6, 3], 1);
        let z = rand_tensor(&[6, 6, 3], 2);
        let color = Arc::new(Problem::per_channel(&y, &Degradation::Identity, &cfg.tau, RecScaling::PerWindow).unwrap());
        let params = ColorPipelineParams::new(init_params(&cfg.layer_dims(), AeMode::default(), 3).unwrap()).into_model();
        let noise = NoiseStream::new(4).sample(color.embed_rows(), color.embed_cols(), 0.1);
        let (lc, cache) = color.losses(&z, &params, &noise).unwrap();
        let gc = backward_total(&cache, 0.5).unwrap();

        let gray_params = ModelParams {
            ae: params.ae.clone(),
            color: None,
        };
        let blocks = split_blocks(&noise, 3).unwrap();
        let (mut l_rec, mut l_ae) = (0.0, 0.0);
        let mut w_grad = Matrix::zeros(gc.ae.layers[0].weight.rows(), gc.ae.layers[0].weight.cols());
        for c in 0..3 {
            let p = Arc::new(Problem::new(&y.channel(c), &Degradation::Identity, &cfg.tau, RecScaling::PerWindow).unwrap());
            let (l, cache) = p.losses(&z.channel(c), &gray_params, &blocks[c]).unwrap();
            l_rec += l.l_rec;
            l_ae += l.l_ae;
            let g = backward_total(&cache, 0.5).unwrap();
            assert!(g.z.max_abs_diff(&gc.z.channel(c)) <= 1e-12);
            for (acc, v) in w_grad.data_mut().iter_mut().zip(g.ae.layers[0].weight.data()) {
                *acc += v;
            }
        }
        assert!((lc.l_rec - l_rec).abs() <= 1e-12 * l_rec.max(1.0));
        assert!((lc.l_ae - l_ae).abs() <= 1e-12 * l_ae.max(1.0));
        assert!(w_grad.max_abs_diff(&gc.ae.layers[0].weight) <= 1e-12);
    }
}
