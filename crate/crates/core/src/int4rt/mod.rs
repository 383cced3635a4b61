//! Integer INT4 inference.
//!
//! Quantized weight matrices are stored as nibble-packed 15-level codes
//! with one scale per tensor; quantized activations are carried as 8-bit
//! codes. Matrix products accumulate code products in `i32` and rescale
//! once. Layers without quantizers run in `f32` through the same kernels as
//! the training tape, so a model with no quantizers reproduces the float
//! forward bit for bit.

mod infer;
mod pack;

pub use infer::{argmax_rows, reference, PackedModel, Runtime};
pub use pack::{
    check_activation_spec, check_weight_spec, int_gemm, int_gemm_acc, rescale, PackedNibbleMatrix,
    QuantizedActivation, MAX_CODE,
};

#[cfg(test)]
mod tests;
