//! A small neural-network laboratory for studying spatial Top-K sparsity:
//! tensors and reverse-mode autodiff, CNN layers, the Top-K operator, a
//! procedural cue-conflict dataset, shape/texture bias metrics, and
//! image-space analysis tools (Gram texture synthesis, masked
//! reconstruction, mask connectivity).

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imageio;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod sparsity;
pub mod tensor;
pub mod train;
pub mod viz;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use sparsity::{TopKConfig, TopKMask, Variant};
pub use tensor::{Scalar, Tensor};
