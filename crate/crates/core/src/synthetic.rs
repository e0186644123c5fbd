//! Procedural test images: piecewise-smooth scenes, their pixel shuffles and
//! uniform noise, all in `[0, 1]`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::DenseTensor;

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    value: f64,
    soft: f64,
}

/// A scene of overlapping soft-edged ellipses on a smooth shaded background
/// with faint low-frequency texture.
pub fn natural_image(height: usize, width: usize, seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let g0: f64 = rng.random_range(0.25..0.55);
    let gy: f64 = rng.random_range(-0.25..0.25);
    let gx: f64 = rng.random_range(-0.25..0.25);
    let blobs: Vec<Blob> = (0..7)
        .map(|_| Blob {
            cy: rng.random_range(0.0..h),
            cx: rng.random_range(0.0..w),
            ry: rng.random_range(0.1..0.35) * h,
            rx: rng.random_range(0.1..0.35) * w,
            angle: rng.random_range(0.0..std::f64::consts::PI),
            value: rng.random_range(0.05..0.95),
            soft: rng.random_range(0.6..1.8),
        })
        .collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.06),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.01..0.03),
            )
        })
        .collect();
    let data = (0..height * width)
        .map(|p| {
            let (y, x) = ((p / width) as f64, (p % width) as f64);
            let mut v = g0 + gy * (y / h - 0.5) + gx * (x / w - 0.5);
            for b in &blobs {
                let (dy, dx) = (y - b.cy, x - b.cx);
                let (c, s) = (b.angle.cos(), b.angle.sin());
                let u = (c * dx + s * dy) / b.rx;
                let t = (-s * dx + c * dy) / b.ry;
                let dist = ((u * u + t * t).sqrt() - 1.0) * b.rx.min(b.ry);
                let alpha = 1.0 / (1.0 + (dist / b.soft).exp());
                v = (1.0 - alpha) * v + alpha * b.value;
            }
            for &(freq, phase, dir, amp) in &waves {
                let k = std::f64::consts::TAU * freq;
                v += amp * (k * (x * dir.cos() + y * dir.sin()) + phase).sin();
            }
            v.clamp(0.0, 1.0)
        })
        .collect();
    DenseTensor::new(vec![height, width], data).expect("finite by construction")
}

/// Random permutation of all entries.
pub fn pixel_shuffle(x: &DenseTensor, seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = x.data().to_vec();
    data.shuffle(&mut rng);
    DenseTensor::new(x.shape().to_vec(), data).expect("permutation of finite data")
}

/// i.i.d. uniform on `[0, 1)`.
pub fn uniform_noise(shape: &[usize], seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseTensor::from_fn(shape, |_| rng.random::<f64>()).expect("valid shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_normalized_and_seeded() {
        let a = natural_image(32, 40, 3);
        assert_eq!(a.shape(), &[32, 40]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, natural_image(32, 40, 3));
        assert_ne!(a, natural_image(32, 40, 4));
    }

    #[test]
    fn shuffle_keeps_the_histogram() {
        let a = natural_image(16, 16, 1);
        let b = pixel_shuffle(&a, 2);
        let mut x = a.data().to_vec();
        let mut y = b.data().to_vec();
        x.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        assert_eq!(x, y);
        assert_ne!(a, b);
    }

    #[test]
    fn natural_images_are_locally_smooth() {
        let a = natural_image(64, 64, 5);
        let b = pixel_shuffle(&a, 5);
        let tv = |t: &DenseTensor| -> f64 {
            let d = t.data();
            (0..64 * 63).map(|p| (d[p + 64] - d[p]).abs()).sum()
        };
        assert!(tv(&a) * 5.0 < tv(&b));
    }
}
