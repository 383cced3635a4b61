//! Dense tensors, deterministic random streams and a small reverse-mode tape.
//!
//! Everything here is generic over [`Real`] so the same model code runs in
//! 32-bit precision for training and in 64-bit precision for gradient checks.

pub mod kernels;
mod real;
mod rng;
mod tape;
mod tensor;

pub use real::Real;
pub use rng::Rng;
pub use tape::{CustomBackward, Grads, Tape, Var};
pub use tensor::Tensor;
