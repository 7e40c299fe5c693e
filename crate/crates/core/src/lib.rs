//! Low-rank hypernetworks for missing-modality learning.
//!
//! A family of `M = 2^N - 1` per-subset networks is stored as one set of
//! CP- or Tucker-factorized kernels that carry an extra model-index mode.
//! Each forward pass reconstructs the kernels of the requested subset only.

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod layers;
pub mod networks;
pub mod params;
pub mod rng;
pub mod subset;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::DenseTensor;
