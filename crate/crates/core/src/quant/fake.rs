use super::{
    bounds_max, bounds_sawb, quantize_linear, ste_backward, ClipBounds, QuantSpec, QuantStats,
    Scheme,
};
use crate::error::{Error, Result};
use crate::numerics::{CustomBackward, Real, Tape, Tensor, Var};

/// Tape handles of learned clip bounds (each a one-element tensor).
///
/// With `neg == None` the bounds are symmetric and `alpha_neg = -alpha_pos`.
#[derive(Clone, Copy, Debug)]
pub struct LearnedBounds {
    pub pos: Var,
    pub neg: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct FakeQuantOut {
    pub var: Var,
    /// Bounds used for this call; `None` for the NONE scheme.
    pub bounds: Option<ClipBounds>,
    pub clipped: usize,
    pub total: usize,
    pub max_abs_out: f64,
}

/// Backward rule of a fake-quantization node: STE on the input, clipped-set
/// sums on learned bounds.
pub struct FakeQuantRule {
    pub bounds: ClipBounds,
    pub tied: bool,
}

impl<T: Real> CustomBackward<T> for FakeQuantRule {
    fn name(&self) -> &'static str {
        "fake_quant"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (gy, gpos, gneg) = ste_backward(grad, inputs[0], &self.bounds)?;
        let mut out = vec![Some(gy)];
        match inputs.len() {
            1 => {}
            2 if self.tied => out.push(Some(Tensor::scalar(T::of(gpos - gneg)))),
            3 => {
                out.push(Some(Tensor::scalar(T::of(gpos))));
                out.push(Some(Tensor::scalar(T::of(gneg))));
            }
            n => return Err(Error::invalid(format!("fake_quant node with {n} inputs"))),
        }
        Ok(out)
    }
}

/// Differentiable quantize-dequantize of `x`.
///
/// The bound source follows `spec.scheme`: MAX and SAWB derive bounds from
/// the current value of `x`, PACT reads `learned`, BAC_FIXED uses `fixed`.
/// Only learned bounds receive gradients.
pub fn fake_quant<T: Real>(
    tape: &Tape<T>,
    x: Var,
    spec: &QuantSpec,
    fixed: Option<&ClipBounds>,
    learned: Option<LearnedBounds>,
) -> Result<FakeQuantOut> {
    let total = tape.value(x).len();
    let (bounds, inputs, tied) = match spec.scheme {
        Scheme::None => {
            return Ok(FakeQuantOut {
                var: x,
                bounds: None,
                clipped: 0,
                total,
                max_abs_out: tape.value(x).max_abs().as_f64(),
            })
        }
        Scheme::Max => (bounds_max(&tape.value(x)), vec![x], false),
        Scheme::Sawb => {
            let stats = QuantStats::of(&tape.value(x));
            (
                bounds_sawb(&stats, spec.bits, spec.level_mode),
                vec![x],
                false,
            )
        }
        Scheme::BacFixed => {
            let b = fixed.ok_or_else(|| Error::invalid("BAC_FIXED quantizer without bounds"))?;
            (*b, vec![x], false)
        }
        Scheme::Pact => {
            let l =
                learned.ok_or_else(|| Error::invalid("PACT quantizer without learned bounds"))?;
            let pos = tape.value(l.pos).item().as_f64();
            match l.neg {
                None => (ClipBounds::symmetric(pos).learnable(), vec![x, l.pos], true),
                Some(neg) => {
                    let nv = tape.value(neg).item().as_f64();
                    (
                        ClipBounds::asymmetric(nv, pos).learnable(),
                        vec![x, l.pos, neg],
                        false,
                    )
                }
            }
        }
    };
    let q = quantize_linear(&tape.value(x), &bounds, spec)?;
    let max_abs_out = q.values.max_abs().as_f64();
    let clipped = q.clipped;
    let var = tape.custom(&inputs, q.values, Box::new(FakeQuantRule { bounds, tied }))?;
    Ok(FakeQuantOut {
        var,
        bounds: Some(bounds),
        clipped,
        total,
        max_abs_out,
    })
}
