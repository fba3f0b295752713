//! Dense f64 tensor engine with reverse-mode automatic differentiation.
//!
//! Everything is 64-bit and CPU-only. Operations are recorded on a [`Tape`];
//! calling [`Tape::backward`] on a scalar root accumulates exact gradients
//! for every leaf created with `requires_grad = true`. Tensors that
//! participate in a tape are never mutated in place.

mod checkpoint;
mod error;
mod kernels;
mod ops;
mod params;
pub mod seed;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use error::{Result, TensorError};
pub use params::ParamSet;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
