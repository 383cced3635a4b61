//! Linear quantizers and their straight-through gradients.
//!
//! A quantizer maps a real tensor onto `L` uniformly spaced levels spanning
//! the clip interval `[alpha_neg, alpha_pos]`, with `L = 2^k` (full) or
//! `L = 2^k - 1` (odd; zero is then a level for symmetric bounds). Ties are
//! resolved away from zero.
//!
//! Level indices are computed in 64-bit arithmetic regardless of the tensor
//! element type; level values are `index · step` in the element type, which
//! is exactly how the packed INT4 runtime reconstructs them.

mod bounds;
mod fake;
pub mod sawb;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub use bounds::{
    bounds_bac, bounds_max, bounds_pact_init, BacBounds, FirstLayerPolicy, TensorRole,
    PACT_INIT_ALPHA,
};
pub use fake::{fake_quant, FakeQuantOut, FakeQuantRule, LearnedBounds};
pub use sawb::{bounds_sawb, SawbEntry, SawbTable};

/// Fallback bound for all-zero tensors.
pub const DEGENERATE_ALPHA: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelMode {
    /// `2^k` levels.
    Full,
    /// `2^k - 1` levels.
    Odd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    Symmetric,
    Asymmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    None,
    Max,
    Sawb,
    Pact,
    BacFixed,
}

/// Full description of one quantizer instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub level_mode: LevelMode,
    pub symmetry: Symmetry,
    pub scheme: Scheme,
}

impl QuantSpec {
    pub fn new(
        scheme: Scheme,
        bits: u32,
        level_mode: LevelMode,
        symmetry: Symmetry,
    ) -> Result<Self> {
        let spec = Self {
            bits,
            level_mode,
            symmetry,
            scheme,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub const fn none() -> Self {
        Self {
            bits: 32,
            level_mode: LevelMode::Full,
            symmetry: Symmetry::Symmetric,
            scheme: Scheme::None,
        }
    }

    pub fn symmetric(scheme: Scheme, bits: u32, level_mode: LevelMode) -> Self {
        Self {
            bits,
            level_mode,
            symmetry: Symmetry::Symmetric,
            scheme,
        }
    }

    pub fn is_none(&self) -> bool {
        self.scheme == Scheme::None
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_none() {
            return Ok(());
        }
        if !(2..=8).contains(&self.bits) {
            return Err(Error::invalid(format!(
                "bit-width {} not in 2..=8",
                self.bits
            )));
        }
        if matches!(self.scheme, Scheme::Max | Scheme::Sawb | Scheme::BacFixed)
            && self.symmetry == Symmetry::Asymmetric
        {
            return Err(Error::invalid(format!(
                "{:?} quantizers are symmetric",
                self.scheme
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        match self.level_mode {
            LevelMode::Full => 1 << self.bits,
            LevelMode::Odd => (1 << self.bits) - 1,
        }
    }
}

/// Clip interval of a quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipBounds {
    pub alpha_pos: f64,
    pub alpha_neg: f64,
    pub learnable: bool,
}

impl ClipBounds {
    pub fn symmetric(alpha: f64) -> Self {
        Self {
            alpha_pos: alpha,
            alpha_neg: -alpha,
            learnable: false,
        }
    }

    pub fn asymmetric(alpha_neg: f64, alpha_pos: f64) -> Self {
        Self {
            alpha_pos,
            alpha_neg,
            learnable: false,
        }
    }

    pub fn learnable(mut self) -> Self {
        self.learnable = true;
        self
    }

    pub fn is_symmetric(&self) -> bool {
        self.alpha_neg == -self.alpha_pos
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_neg.is_finite() && self.alpha_pos.is_finite())
            || !(self.alpha_neg < 0.0 && 0.0 < self.alpha_pos)
        {
            return Err(Error::invalid(format!(
                "clip bounds must satisfy alpha_neg < 0 < alpha_pos, got [{}, {}]",
                self.alpha_neg, self.alpha_pos
            )));
        }
        Ok(())
    }
}

/// Per-tensor moments used by SAWB.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantStats {
    pub mean_abs: f64,
    pub mean_sq: f64,
    pub max_abs: f64,
}

impl QuantStats {
    pub fn of_slice<T: Real>(data: &[T]) -> Self {
        let n = data.len().max(1) as f64;
        let (mut sa, mut sq, mut mx) = (0.0f64, 0.0f64, 0.0f64);
        for v in data {
            let a = v.as_f64().abs();
            sa += a;
            sq += a * a;
            mx = mx.max(a);
        }
        Self {
            mean_abs: sa / n,
            mean_sq: sq / n,
            max_abs: mx,
        }
    }

    pub fn of<T: Real>(t: &Tensor<T>) -> Self {
        Self::of_slice(t.data())
    }
}

/// Geometry of the level set for one `(spec, bounds)` pair.
#[derive(Clone, Copy, Debug)]
pub struct LevelGrid {
    lo: f64,
    hi: f64,
    levels: usize,
    step: f64,
    inv_step: f64,
    symmetric: bool,
}

impl LevelGrid {
    pub fn new(spec: &QuantSpec, bounds: &ClipBounds) -> Result<Self> {
        spec.validate()?;
        if spec.is_none() {
            return Err(Error::invalid("NONE quantizer has no level grid"));
        }
        bounds.validate()?;
        let symmetric = spec.symmetry == Symmetry::Symmetric;
        if symmetric && !bounds.is_symmetric() {
            return Err(Error::invalid(
                "symmetric quantizer given asymmetric bounds",
            ));
        }
        let levels = spec.levels();
        let span = bounds.alpha_pos - bounds.alpha_neg;
        let gaps = (levels - 1) as f64;
        Ok(Self {
            lo: bounds.alpha_neg,
            hi: bounds.alpha_pos,
            levels,
            step: span / gaps,
            inv_step: gaps / span,
            symmetric,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Centre index `(L-1)/2` of a symmetric grid.
    fn center(&self) -> f64 {
        (self.levels - 1) as f64 / 2.0
    }

    /// Value of level `j` in element precision.
    #[inline]
    pub fn level<T: Real>(&self, j: usize) -> T {
        if self.symmetric {
            T::of(j as f64 - self.center()) * T::of(self.step)
        } else {
            T::of(self.lo) + T::of(j as f64) * T::of(self.step)
        }
    }

    /// Index of the level nearest to `y`, ties away from zero.
    #[inline]
    pub fn index(&self, y: f64) -> usize {
        let top = (self.levels - 1) as f64;
        let j = if self.symmetric {
            // centred coordinate; levels sit at u = j - c
            let c = self.center();
            let u = y * self.inv_step;
            let snapped = if self.levels % 2 == 1 {
                round_half_away(u)
            } else {
                // half-integer positions: nearest is floor(u) + 0.5; integer u is a tie
                let f = u.floor();
                if u == f {
                    if u >= 0.0 {
                        u + 0.5
                    } else {
                        u - 0.5
                    }
                } else {
                    f + 0.5
                }
            };
            (snapped + c).clamp(0.0, top)
        } else {
            let t = (y - self.lo) * self.inv_step;
            let f = t.floor();
            let j = if t - f == 0.5 {
                // tie between f and f+1: pick the one farther from zero
                let (a, b) = (self.lo + f * self.step, self.lo + (f + 1.0) * self.step);
                if b.abs() >= a.abs() {
                    f + 1.0
                } else {
                    f
                }
            } else {
                t.round()
            };
            j.clamp(0.0, top)
        };
        j as usize
    }

    /// Whether `y` lies strictly outside the clip interval.
    #[inline]
    pub fn clips(&self, y: f64) -> bool {
        y > self.hi || y < self.lo
    }

    /// Signed code `j - (L-1)/2` of a symmetric odd grid.
    pub fn signed_code(&self, j: usize) -> Option<i32> {
        (self.symmetric && self.levels % 2 == 1).then(|| j as i32 - ((self.levels - 1) / 2) as i32)
    }
}

#[inline]
fn round_half_away(x: f64) -> f64 {
    // f64::round already rounds half away from zero
    x.round()
}

/// Result of [`quantize_linear`].
#[derive(Clone, Debug)]
pub struct Quantized<T: Real> {
    pub values: Tensor<T>,
    /// Level index per element, in `0..L`.
    pub indices: Vec<u16>,
    /// Elements strictly outside the clip interval.
    pub clipped: usize,
    pub grid: LevelGrid,
}

impl<T: Real> Quantized<T> {
    /// Signed integer codes for symmetric odd grids (`-c..=c`).
    pub fn signed_codes(&self) -> Option<Vec<i32>> {
        self.grid.signed_code(0)?;
        Some(
            self.indices
                .iter()
                .map(|&j| self.grid.signed_code(j as usize).unwrap())
                .collect(),
        )
    }
}

/// Clamp and snap every element of `y` to the nearest level.
pub fn quantize_linear<T: Real>(
    y: &Tensor<T>,
    bounds: &ClipBounds,
    spec: &QuantSpec,
) -> Result<Quantized<T>> {
    if !y.all_finite() {
        return Err(Error::NonFinite {
            op: "quantize_linear",
        });
    }
    let grid = LevelGrid::new(spec, bounds)?;
    let table: Vec<T> = (0..grid.levels()).map(|j| grid.level(j)).collect();
    let mut values = Vec::with_capacity(y.len());
    let mut indices = Vec::with_capacity(y.len());
    let mut clipped = 0;
    for v in y.data() {
        let yv = v.as_f64();
        clipped += grid.clips(yv) as usize;
        let j = grid.index(yv);
        indices.push(j as u16);
        values.push(table[j]);
    }
    Ok(Quantized {
        values: Tensor::new(y.shape(), values)?,
        indices,
        clipped,
        grid,
    })
}

/// Quantize one scalar (64-bit).
pub fn quantize_scalar(y: f64, bounds: &ClipBounds, spec: &QuantSpec) -> Result<f64> {
    let grid = LevelGrid::new(spec, bounds)?;
    Ok(grid.level(grid.index(y)))
}

/// Straight-through backward rule for a clipped linear quantizer.
///
/// `grad_y` passes `upstream` where `alpha_neg < y < alpha_pos` and is zero
/// elsewhere; the bound gradients collect `upstream` over the elements clipped
/// at the respective bound.
pub fn ste_backward<T: Real>(
    upstream: &Tensor<T>,
    y: &Tensor<T>,
    bounds: &ClipBounds,
) -> Result<(Tensor<T>, f64, f64)> {
    if upstream.shape() != y.shape() {
        return Err(Error::shape("ste_backward", upstream.shape(), y.shape()));
    }
    let (lo, hi) = (bounds.alpha_neg, bounds.alpha_pos);
    let mut gpos = 0.0;
    let mut gneg = 0.0;
    let gy = y
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&yv, &g)| {
            let yv = yv.as_f64();
            if yv >= hi {
                gpos += g.as_f64();
                T::zero()
            } else if yv <= lo {
                gneg += g.as_f64();
                T::zero()
            } else {
                g
            }
        })
        .collect();
    Ok((Tensor::new(y.shape(), gy)?, gpos, gneg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(y: f64, alpha: f64, bits: u32, mode: LevelMode) -> f64 {
        let spec = QuantSpec::symmetric(Scheme::Max, bits, mode);
        quantize_scalar(y, &ClipBounds::symmetric(alpha), &spec).unwrap()
    }

    #[test]
    fn scalar_examples() {
        // (0.30 + 1) * 7.5 = 9.75 -> 10 -> 10 / 7.5 - 1
        assert!((q(0.30, 1.0, 4, LevelMode::Full) - (10.0 / 7.5 - 1.0)).abs() < 1e-12);
        // 0.5 * 7 = 3.5 rounds away from zero to 4
        assert!((q(0.5, 1.0, 4, LevelMode::Odd) - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(q(2.0, 1.0, 4, LevelMode::Odd), 1.0);
        assert_eq!(q(2.0, 1.0, 4, LevelMode::Full), 1.0);
        assert_eq!(q(-2.0, 1.0, 4, LevelMode::Full), -1.0);
    }

    #[test]
    fn zero_is_exact_for_odd_levels() {
        for bits in 2..=8 {
            for alpha in [1e-3, 0.37, 1.0, 1.25, 7.9] {
                assert_eq!(q(0.0, alpha, bits, LevelMode::Odd), 0.0);
            }
        }
    }

    #[test]
    fn full_levels_tie_at_zero_goes_up() {
        let v = q(0.0, 1.0, 2, LevelMode::Full);
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_tie_goes_away_from_zero() {
        // levels -1, 0, 1, 2 (4 levels over [-1, 2]); 1.5 ties between 1 and 2
        let spec = QuantSpec::new(Scheme::Pact, 2, LevelMode::Full, Symmetry::Asymmetric).unwrap();
        let b = ClipBounds::asymmetric(-1.0, 2.0);
        assert_eq!(quantize_scalar(1.5, &b, &spec).unwrap(), 2.0);
        assert_eq!(quantize_scalar(-0.5, &b, &spec).unwrap(), -1.0);
    }

    #[test]
    fn invalid_inputs() {
        let spec = QuantSpec::symmetric(Scheme::Max, 4, LevelMode::Odd);
        let t = Tensor::<f32>::from_f64(&[1], &[0.5]).unwrap();
        assert!(quantize_linear(&t, &ClipBounds::asymmetric(0.5, 1.0), &spec).is_err());
        assert!(quantize_linear(&t, &ClipBounds::asymmetric(-0.5, 1.0), &spec).is_err());
        assert!(QuantSpec::new(Scheme::Max, 9, LevelMode::Odd, Symmetry::Symmetric).is_err());
        assert!(QuantSpec::new(Scheme::Max, 4, LevelMode::Odd, Symmetry::Asymmetric).is_err());
    }

    #[test]
    fn counts_clipped_and_exposes_codes() {
        let spec = QuantSpec::symmetric(Scheme::BacFixed, 4, LevelMode::Odd);
        let t = Tensor::<f32>::from_f64(&[4], &[-3.0, -1.0, 0.2, 1.0]).unwrap();
        let out = quantize_linear(&t, &ClipBounds::symmetric(1.0), &spec).unwrap();
        assert_eq!(out.clipped, 1);
        assert_eq!(out.signed_codes().unwrap(), vec![-7, -7, 1, 7]);
    }

    #[test]
    fn ste_examples() {
        let b = ClipBounds::symmetric(1.0);
        let y = Tensor::<f64>::from_f64(&[3], &[0.3, 2.0, -1.5]).unwrap();
        let g = Tensor::<f64>::from_f64(&[3], &[0.7, 0.25, -2.0]).unwrap();
        let (gy, gp, gn) = ste_backward(&g, &y, &b).unwrap();
        assert_eq!(gy.data(), &[0.7, 0.0, 0.0]);
        assert_eq!(gp, 0.25);
        assert_eq!(gn, -2.0);
    }
}
