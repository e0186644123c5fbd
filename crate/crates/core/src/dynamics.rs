//! Lorenz-system signals and their corruption.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::degradation::{make_random_mask, Mask};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LorenzConfig {
    pub sigma_l: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
    pub steps: usize,
    /// Steps integrated and discarded before recording.
    pub burn_in: usize,
    pub initial: [f64; 3],
    /// Recorded state component: 0, 1 or 2.
    pub component: usize,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self {
            sigma_l: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.01,
            steps: 2000,
            burn_in: 3000,
            initial: [1.0, 1.0, 1.0],
            component: 0,
        }
    }
}

impl LorenzConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || self.steps == 0 || self.component > 2 {
            return Err(Error::param(format!(
                "need dt > 0, steps ≥ 1 and component ≤ 2, got dt = {}, steps = {}, component = {}",
                self.dt, self.steps, self.component
            )));
        }
        Ok(())
    }

    fn rhs(&self, s: [f64; 3]) -> [f64; 3] {
        let [x, y, z] = s;
        [self.sigma_l * (y - x), x * (self.rho - z) - y, x * y - self.beta * z]
    }

    /// Classical fourth-order Runge–Kutta step.
    pub fn rk4_step(&self, s: [f64; 3], dt: f64) -> [f64; 3] {
        let add = |a: [f64; 3], b: [f64; 3], h: f64| [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]];
        let k1 = self.rhs(s);
        let k2 = self.rhs(add(s, k1, dt / 2.0));
        let k3 = self.rhs(add(s, k2, dt / 2.0));
        let k4 = self.rhs(add(s, k3, dt));
        std::array::from_fn(|i| s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
    }
}

/// `steps` states after the burn-in.
pub fn lorenz_trajectory(cfg: &LorenzConfig) -> Result<Vec<[f64; 3]>> {
    cfg.validate()?;
    let mut s = cfg.initial;
    let mut out = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.burn_in + cfg.steps {
        s = cfg.rk4_step(s, cfg.dt);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        if step >= cfg.burn_in {
            out.push(s);
        }
    }
    Ok(out)
}

/// The chosen component, affinely rescaled to `[−1, 1]`; a constant signal maps to zeros.
pub fn lorenz_generate(cfg: &LorenzConfig) -> Result<DenseTensor> {
    let v: Vec<f64> = lorenz_trajectory(cfg)?.iter().map(|s| s[cfg.component]).collect();
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let data = if hi > lo {
        v.iter().map(|x| 2.0 * (x - lo) / (hi - lo) - 1.0).collect()
    } else {
        vec![0.0; v.len()]
    };
    DenseTensor::new(vec![cfg.steps], data)
}

#[derive(Clone, Debug)]
pub struct CorruptedSignal {
    /// Noisy signal with missing entries set to zero.
    pub y: DenseTensor,
    pub mask: Mask,
    /// The drawn noise, for every entry.
    pub noise: Vec<f64>,
    /// Occlusions that had to be clipped to the signal, as requested.
    pub clipped: Vec<(usize, usize)>,
}

/// Adds Gaussian noise, drops `round(missing_rate·n)` random entries and
/// blanks every `(start, length)` occlusion.
pub fn corrupt_signal(x: &DenseTensor, noise_std: f64, missing_rate: f64, occlusions: &[(usize, usize)], seed: u64) -> Result<CorruptedSignal> {
    if x.ndim() != 1 {
        return Err(Error::mismatch(format!("expected a 1-D signal, got {:?}", x.shape())));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::param(format!("noise level must be non-negative, got {noise_std}")));
    }
    let n = x.len();
    let random = make_random_mask(&[n], missing_rate, seed)?;
    let mut observed = random.observed().to_vec();
    let mut clipped = Vec::new();
    for &(start, len) in occlusions {
        let end = start.saturating_add(len);
        if end > n {
            clipped.push((start, len));
        }
        for o in observed.iter_mut().take(end.min(n)).skip(start.min(n)) {
            *o = false;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED));
    let noise: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            noise_std * z
        })
        .collect();
    let y = x
        .data()
        .iter()
        .zip(&noise)
        .zip(&observed)
        .map(|((v, e), &o)| if o { v + e } else { 0.0 })
        .collect();
    Ok(CorruptedSignal {
        y: DenseTensor::new(vec![n], y)?,
        mask: Mask::new(vec![n], observed)?,
        noise,
        clipped,
    })
}
