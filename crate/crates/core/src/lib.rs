//! Core of a small adversarial-transferability laboratory: tensors and
//! kernels, toy ViT/CNN classifiers with hookable backward passes,
//! feature-sensitive gradient modulation, iterative attacks and the
//! spectral/stealth metrics used to evaluate them.

pub mod analysis;
pub mod attack;
pub mod error;
pub mod kernels;
pub mod model;
pub mod modulation;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
