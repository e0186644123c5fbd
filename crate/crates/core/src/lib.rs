//! Manifold modeling in embedded space.
//!
//! A corrupted signal, image or tensor `Y = F(X)` is reconstructed as
//! `X̂ = H† A(H(Z))`: the latent tensor `Z` is delay-embedded into a Hankel
//! matrix `H(Z)`, every column (patch) is passed through a small denoising
//! auto-encoder `A`, and the result is folded back with the pseudo-inverse
//! `H†`. `Z` and `A` are optimized jointly so that `F(X̂)` fits the
//! observation while the patches stay close to the auto-encoder's
//! low-dimensional manifold.

pub mod error;
pub mod tensor;
pub mod embedding;
pub mod autoencoder;
pub mod degradation;
pub mod solver;
pub mod imaging;
pub mod dynamics;
pub mod synthetic;
pub mod io;

pub use error::{Error, Result};
pub use tensor::{DenseTensor, EmbedShape, Matrix};
pub use autoencoder::{AeMode, MlpParams};
pub use degradation::{Degradation, Mask};
pub use solver::{LambdaMode, ModelParams, Reconstruction, RecScaling, SolverConfig, TraceRecord, ZInit};
