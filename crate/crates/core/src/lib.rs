//! Quantization-aware training and packed INT4 inference for LSTM speech
//! models.
//!
//! * [`numerics`]: tensors, deterministic RNG, reverse-mode tape
//! * [`quant`]: linear quantizers (MAX, SAWB, PACT, bound-aware clipping) and
//!   straight-through gradients
//! * [`qlstm`]: quantized LSTM cells/layers and FC layers
//! * [`models`]: DBLSTM-HMM and RNN-T presets with parameter accounting
//! * [`train`]: optimizers, LR schedules, checkpoints, QAT loop, toy tasks
//! * [`int4rt`]: nibble-packed weights and integer GEMM inference
//! * [`perf`]: analytical component-wise runtime estimator

pub mod error;
pub mod int4rt;
pub mod models;
pub mod numerics;
pub mod perf;
pub mod qlstm;
pub mod quant;
pub mod train;

pub use error::{Error, Result};
