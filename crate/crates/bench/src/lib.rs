//! Fixtures shared by the benchmarks.

use mmes_core::autoencoder::{default_chain, init_params, AeMode};
use mmes_core::degradation::{make_random_mask, Degradation};
use mmes_core::synthetic::natural_image;
use mmes_core::{DenseTensor, EmbedShape, Matrix, MlpParams, SolverConfig};

pub fn image(size: usize) -> DenseTensor {
    natural_image(size, size, 1)
}

/// Half-observed completion problem on a `size`×`size` image.
pub fn completion(size: usize) -> (DenseTensor, Degradation) {
    let f = Degradation::Mask(make_random_mask(&[size, size], 0.5, 1).unwrap());
    let y = f.apply(&image(size)).unwrap();
    (y, f)
}

pub fn solver_config(tau: usize, hidden_factor: usize) -> SolverConfig {
    let mut cfg = SolverConfig::new(EmbedShape::uniform(tau, 2).unwrap(), 4, 0.05);
    cfg.hidden_factor = hidden_factor;
    cfg
}

/// Default chain for a `tau`×`tau` window and a matching batch of columns.
pub fn autoencoder(tau: usize, hidden_factor: usize, cols: usize) -> (MlpParams, Matrix) {
    let d = tau * tau;
    let p = init_params(&default_chain(d, 4, hidden_factor, AeMode::default()), AeMode::default(), 0).unwrap();
    let h = Matrix::from_fn(d, cols, |i, j| ((i * 31 + j * 17) % 97) as f64 / 97.0);
    (p, h)
}
