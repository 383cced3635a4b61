use serde::{Deserialize, Serialize};

use super::{ClipBounds, DEGENERATE_ALPHA};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Initial magnitude of learnable clip bounds.
pub const PACT_INIT_ALPHA: f64 = 4.0;

/// `α = max|y|`, recomputed on every call.
pub fn bounds_max<T: Real>(y: &Tensor<T>) -> ClipBounds {
    let m = y.max_abs().as_f64();
    ClipBounds::symmetric(if m > 0.0 { m } else { DEGENERATE_ALPHA })
}

/// Learnable bounds at their initial value.
pub fn bounds_pact_init(symmetric: bool) -> ClipBounds {
    let b = if symmetric {
        ClipBounds::symmetric(PACT_INIT_ALPHA)
    } else {
        ClipBounds::asymmetric(-PACT_INIT_ALPHA, PACT_INIT_ALPHA)
    };
    b.learnable()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Input,
    Hidden,
}

/// How bound-aware clipping treats the first LSTM layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstLayerPolicy {
    /// PACT-style learned bounds.
    Learnable,
    /// Leave the layer unquantized.
    FullPrecision,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BacBounds {
    Policy(FirstLayerPolicy),
    Fixed(ClipBounds),
}

/// Bound-aware clipping.
///
/// Beyond the first layer LSTM inputs are hidden states of the previous
/// layer (|h| < 1) rescaled by inverted dropout, so the input bound is
/// `1/(1-p)`. Hidden states see no dropout and get `α = 1`. Layer 0 (raw
/// features in, and a hidden state that is free to stay small) is handled
/// entirely by `first_layer`.
pub fn bounds_bac(
    layer_index: usize,
    role: TensorRole,
    dropout_p: f64,
    first_layer: FirstLayerPolicy,
) -> Result<BacBounds> {
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(Error::invalid(format!(
            "dropout probability {dropout_p} not in [0, 1)"
        )));
    }
    if layer_index == 0 {
        return Ok(BacBounds::Policy(first_layer));
    }
    let alpha = match role {
        TensorRole::Input => 1.0 / (1.0 - dropout_p),
        TensorRole::Hidden => 1.0,
    };
    Ok(BacBounds::Fixed(ClipBounds::symmetric(alpha)))
}
