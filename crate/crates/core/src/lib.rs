//! Train-large-then-compress workbench.
//!
//! Trains small pre-norm Transformer masked language models with FLOP and
//! wall-clock metering, compresses them with uniform k-bit quantization and
//! iterative magnitude pruning, and analyses the resulting accuracy/memory
//! trade-offs.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two concrete instantiations.

pub mod analysis;
pub mod compress;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Mode, ModelConfig, ModuleGroup, ShareMode, TransformerModel};
pub use scalar::Scalar;
pub use tensor::{Gradients, Tape, Tensor, Var, IGNORE_INDEX};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = TransformerModel<f32>;
pub type Model64 = TransformerModel<f64>;
