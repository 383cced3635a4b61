use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::quant::{quantize_linear, ClipBounds, LevelMode, QuantSpec, Scheme};

/// Largest packed code magnitude (15-level symmetric INT4).
pub const MAX_CODE: i8 = 7;

fn int4_spec() -> QuantSpec {
    QuantSpec::symmetric(Scheme::BacFixed, 4, LevelMode::Odd)
}

/// A matrix of signed INT4 codes in `-7..=7`, two per byte, with one real
/// scale for the whole tensor.
///
/// Elements are taken in row-major order; element `2i` sits in the low
/// nibble of byte `i` and element `2i+1` in the high nibble, each as 4-bit
/// two's complement. An odd element count leaves the last high nibble 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedNibbleMatrix {
    pub rows: usize,
    pub cols: usize,
    pub scale: f32,
    pub bytes: Vec<u8>,
}

impl PackedNibbleMatrix {
    /// Snap `w` (any 2-D tensor) to the 15-level grid on `bounds` and pack
    /// the codes. The scale is the grid step in `f32`, so
    /// `code · scale` reproduces the fake-quantized value bit for bit.
    pub fn pack(w: &Tensor<f32>, bounds: &ClipBounds) -> Result<Self> {
        if w.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "pack expects a matrix, got shape {:?}",
                w.shape()
            )));
        }
        if !bounds.is_symmetric() {
            return Err(Error::PolicyMismatch(
                "asymmetric weight bounds cannot be packed".into(),
            ));
        }
        let q = quantize_linear(w, bounds, &int4_spec())?;
        let codes: Vec<i8> = q
            .signed_codes()
            .expect("odd symmetric grid")
            .iter()
            .map(|&c| c as i8)
            .collect();
        Ok(Self::from_codes(
            w.rows(),
            w.cols(),
            q.grid.step() as f32,
            &codes,
        ))
    }

    pub fn from_codes(rows: usize, cols: usize, scale: f32, codes: &[i8]) -> Self {
        assert_eq!(codes.len(), rows * cols);
        let bytes = codes
            .chunks(2)
            .map(|p| {
                debug_assert!(p.iter().all(|c| c.abs() <= MAX_CODE));
                let lo = p[0] as u8 & 0x0f;
                let hi = p.get(1).map_or(0, |&c| c as u8 & 0x0f);
                lo | (hi << 4)
            })
            .collect();
        Self {
            rows,
            cols,
            scale,
            bytes,
        }
    }

    /// Check the byte count and that no nibble holds -8.
    pub fn validate(&self) -> Result<()> {
        let n = self.rows * self.cols;
        if self.bytes.len() != n.div_ceil(2) {
            return Err(Error::Checkpoint(format!(
                "packed {}×{} matrix needs {} bytes, found {}",
                self.rows,
                self.cols,
                n.div_ceil(2),
                self.bytes.len()
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Checkpoint(format!(
                "packed scale {} is not positive",
                self.scale
            )));
        }
        if self
            .bytes
            .iter()
            .any(|&b| b & 0x0f == 0x08 || b >> 4 == 0x08)
        {
            return Err(Error::Checkpoint("packed nibble holds code -8".into()));
        }
        Ok(())
    }

    #[inline]
    fn nibble(b: u8) -> i8 {
        // sign-extend the low 4 bits
        ((b << 4) as i8) >> 4
    }

    pub fn codes(&self) -> Vec<i8> {
        let n = self.rows * self.cols;
        let mut out = Vec::with_capacity(n + 1);
        for &b in &self.bytes {
            out.push(Self::nibble(b));
            out.push(Self::nibble(b >> 4));
        }
        out.truncate(n);
        out
    }

    /// `code · scale` per element.
    pub fn unpack(&self) -> Tensor<f32> {
        let data = self
            .codes()
            .iter()
            .map(|&c| c as f32 * self.scale)
            .collect();
        Tensor::new(&[self.rows, self.cols], data).expect("consistent packed shape")
    }

    pub fn byte_len(&self) -> usize {
        self.bytes.len()
    }
}

/// Integer codes of a quantized activation matrix (8-bit carriage for any
/// width up to 8 bits).
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedActivation {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i8>,
    pub scale: f32,
    /// Level count `L` (odd); codes lie in `±(L-1)/2`.
    pub levels: usize,
}

impl QuantizedActivation {
    /// Quantize `x` on a symmetric odd-level grid.
    pub fn quantize(x: &Tensor<f32>, bounds: &ClipBounds, spec: &QuantSpec) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "activation must be a matrix, got {:?}",
                x.shape()
            )));
        }
        check_activation_spec(spec)?;
        let q = quantize_linear(x, bounds, spec)?;
        let codes = q.signed_codes().ok_or_else(|| {
            Error::PolicyMismatch("activation grid is not symmetric odd-level".into())
        })?;
        Ok(Self {
            rows: x.rows(),
            cols: x.cols(),
            codes: codes.into_iter().map(|c| c as i8).collect(),
            scale: q.grid.step() as f32,
            levels: q.grid.levels(),
        })
    }

    pub fn max_code(&self) -> i32 {
        ((self.levels - 1) / 2) as i32
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        let data = self.codes.iter().map(|&c| c as f32 * self.scale).collect();
        Tensor::new(&[self.rows, self.cols], data).expect("consistent activation shape")
    }
}

/// Activation quantizers the integer path accepts: symmetric, odd levels.
pub fn check_activation_spec(spec: &QuantSpec) -> Result<()> {
    if spec.is_none() {
        return Err(Error::PolicyMismatch("activation is not quantized".into()));
    }
    spec.validate()?;
    if spec.symmetry != crate::quant::Symmetry::Symmetric || spec.level_mode != LevelMode::Odd {
        return Err(Error::PolicyMismatch(format!(
            "integer activations need symmetric odd-level grids, got {:?} {:?}",
            spec.symmetry, spec.level_mode
        )));
    }
    Ok(())
}

/// Weight quantizers that can be packed: 4-bit, symmetric, odd levels.
pub fn check_weight_spec(spec: &QuantSpec) -> Result<()> {
    if spec.bits != 4
        || spec.level_mode != LevelMode::Odd
        || spec.symmetry != crate::quant::Symmetry::Symmetric
    {
        return Err(Error::PolicyMismatch(format!(
            "packed weights need 4-bit symmetric odd-level quantizers, got {}-bit {:?} {:?}",
            spec.bits, spec.level_mode, spec.symmetry
        )));
    }
    Ok(())
}

/// Raw `i32` accumulators of `a · w` for codes `a[m×k]`, `w[k×n]`.
///
/// Errors if `k · max|a| · max|w|` could exceed `i32::MAX`, which is what
/// makes the accumulation overflow-free.
pub fn int_gemm_acc(
    a: &QuantizedActivation,
    w_codes: &[i8],
    k: usize,
    n: usize,
) -> Result<Vec<i32>> {
    if a.cols != k || w_codes.len() != k * n {
        return Err(Error::shape("int_gemm", &[a.rows, a.cols], &[k, n]));
    }
    let bound = k as i64 * a.max_code() as i64 * MAX_CODE as i64;
    if bound > i32::MAX as i64 {
        return Err(Error::invalid(format!(
            "int_gemm: inner dimension {k} may overflow the i32 accumulator"
        )));
    }
    let mut out = vec![0i32; a.rows * n];
    for i in 0..a.rows {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.codes[i * k + p] as i32;
            if av == 0 {
                continue;
            }
            for (o, &wv) in row.iter_mut().zip(&w_codes[p * n..(p + 1) * n]) {
                *o += av * wv as i32;
            }
        }
    }
    Ok(out)
}

/// Rescale accumulators with one multiply by `scale_a · scale_w`, formed
/// in 64-bit and rounded to `f32` once.
pub fn rescale(acc: &[i32], scale_a: f32, scale_w: f32) -> Vec<f32> {
    let s = scale_a as f64 * scale_w as f64;
    acc.iter().map(|&v| (v as f64 * s) as f32).collect()
}

/// `a[m×k] · w[k×n]` with integer accumulation.
pub fn int_gemm(a: &QuantizedActivation, w: &PackedNibbleMatrix) -> Result<Tensor<f32>> {
    let acc = int_gemm_acc(a, &w.codes(), w.rows, w.cols)?;
    Tensor::new(&[a.rows, w.cols], rescale(&acc, a.scale, w.scale))
}
