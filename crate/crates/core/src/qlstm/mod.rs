//! Quantized LSTM and fully connected layers.
//!
//! Placement: weight matrices and layer/step inputs go through quantizers,
//! biases and the cell state never do. Gate order everywhere is
//! (input, forget, cell, output). Sequences are time-major.

mod layer;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{Real, Rng, Tape, Var};
use crate::quant::{
    bounds_pact_init, fake_quant, ClipBounds, LearnedBounds, QuantSpec, Scheme, Symmetry,
};

pub use layer::{
    lstm_cell_step, quantize_cell, run_fc, run_layer, CellParams, FcBinding, LayerBinding,
    QuantizedCell,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
    Bidirectional,
}

impl Direction {
    pub fn count(self) -> usize {
        match self {
            Direction::Bidirectional => 2,
            _ => 1,
        }
    }

    /// Per-direction parameter name suffixes, in output concatenation order.
    pub fn names(self) -> &'static [&'static str] {
        match self {
            Direction::Forward => &["fwd"],
            Direction::Backward => &["bwd"],
            Direction::Bidirectional => &["fwd", "bwd"],
        }
    }
}

/// A quantizer attached to one tensor class of one layer.
///
/// `bounds` holds the fixed interval for BAC_FIXED and the initial interval
/// for PACT; it is unused by NONE, MAX and SAWB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorQuantizer {
    pub spec: QuantSpec,
    pub bounds: Option<ClipBounds>,
}

impl TensorQuantizer {
    pub const NONE: TensorQuantizer = TensorQuantizer {
        spec: QuantSpec::none(),
        bounds: None,
    };

    pub fn dynamic(spec: QuantSpec) -> Self {
        Self { spec, bounds: None }
    }

    pub fn fixed(spec: QuantSpec, bounds: ClipBounds) -> Self {
        Self {
            spec: QuantSpec {
                scheme: Scheme::BacFixed,
                ..spec
            },
            bounds: Some(bounds),
        }
    }

    pub fn learnable(spec: QuantSpec) -> Self {
        Self {
            spec: QuantSpec {
                scheme: Scheme::Pact,
                ..spec
            },
            bounds: Some(bounds_pact_init(spec.symmetry == Symmetry::Symmetric)),
        }
    }

    pub fn is_none(&self) -> bool {
        self.spec.is_none()
    }

    pub fn is_learnable(&self) -> bool {
        self.spec.scheme == Scheme::Pact
    }
}

/// One LSTM layer (both directions share quantizers and dropout).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QLayerSpec {
    pub layer_index: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub direction: Direction,
    /// Inverted dropout on the layer input during training.
    pub dropout_p: f64,
    pub weight_q: TensorQuantizer,
    pub input_q: TensorQuantizer,
    pub hidden_q: TensorQuantizer,
}

impl QLayerSpec {
    pub fn output_dim(&self) -> usize {
        self.hidden * self.direction.count()
    }

    /// Parameters per direction: W (4h×d), R (4h×h), b (4h).
    pub fn params_per_direction(&self) -> (usize, usize) {
        let h4 = 4 * self.hidden;
        (h4 * (self.input_dim + self.hidden), h4)
    }
}

/// Fully connected layer `y = q(x) · q(W)ᵀ + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QFCSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight_q: TensorQuantizer,
    pub act_q: TensorQuantizer,
}

/// Running statistics of one named quantizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeStats {
    pub calls: u64,
    pub clipped: u64,
    pub total: u64,
    pub max_abs_out: f64,
    pub last_bounds: Option<ClipBounds>,
}

/// Forward-pass state: tape, dropout stream, train/eval mode and
/// per-quantizer clip counters.
pub struct Ctx<'t, T: Real> {
    pub tape: &'t Tape<T>,
    pub rng: Rng,
    pub training: bool,
    pub probes: BTreeMap<String, ProbeStats>,
}

impl<'t, T: Real> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, rng: Rng, training: bool) -> Self {
        Self {
            tape,
            rng,
            training,
            probes: BTreeMap::new(),
        }
    }

    /// Fake-quantize `x` and record clip statistics under `name`.
    pub fn quantize(
        &mut self,
        name: &str,
        x: Var,
        q: &TensorQuantizer,
        learned: Option<LearnedBounds>,
    ) -> Result<Var> {
        if q.is_none() {
            return Ok(x);
        }
        let out = fake_quant(self.tape, x, &q.spec, q.bounds.as_ref(), learned)?;
        let p = self.probes.entry(name.to_string()).or_default();
        p.calls += 1;
        p.clipped += out.clipped as u64;
        p.total += out.total as u64;
        p.max_abs_out = p.max_abs_out.max(out.max_abs_out);
        p.last_bounds = out.bounds;
        Ok(out.var)
    }
}

#[cfg(test)]
mod tests;
