use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qlstm::{Direction, QFCSpec, QLayerSpec, TensorQuantizer};
use crate::quant::{
    bounds_bac, BacBounds, ClipBounds, FirstLayerPolicy, LevelMode, QuantSpec, Scheme, Symmetry,
    TensorRole,
};

/// How activations (LSTM inputs, hidden states, FC inputs) are quantized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActScheme {
    None,
    Max,
    Sawb,
    Pact,
    /// Fixed bounds wherever the range is known from the LSTM cell,
    /// learnable bounds elsewhere.
    Bac,
}

/// Which tensors get which quantizer.
///
/// `first_layer` applies to layer 0 of the bidirectional stack under every
/// scheme: `full_precision` leaves that whole layer unquantized, while
/// `learnable` quantizes it like the other layers (with learned input
/// bounds under BAC). `quantize_heads` covers the DBLSTM FC layers or the
/// transducer joint network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantPolicy {
    pub weight_scheme: Scheme,
    pub weight_bits: u32,
    pub weight_levels: LevelMode,
    pub act_scheme: ActScheme,
    pub act_bits: u32,
    pub act_levels: LevelMode,
    /// Symmetry of learned activation bounds.
    pub act_symmetry: Symmetry,
    pub first_layer: FirstLayerPolicy,
    pub quantize_heads: bool,
    pub quantize_prediction: bool,
}

impl Default for QuantPolicy {
    fn default() -> Self {
        Self::fp32()
    }
}

impl QuantPolicy {
    pub fn fp32() -> Self {
        Self {
            weight_scheme: Scheme::None,
            weight_bits: 32,
            weight_levels: LevelMode::Odd,
            act_scheme: ActScheme::None,
            act_bits: 32,
            act_levels: LevelMode::Odd,
            act_symmetry: Symmetry::Symmetric,
            first_layer: FirstLayerPolicy::Learnable,
            quantize_heads: true,
            quantize_prediction: true,
        }
    }

    /// Every layer quantized with the given schemes at `bits`.
    pub fn uniform(bits: u32, weight_scheme: Scheme, act_scheme: ActScheme) -> Self {
        Self {
            weight_scheme,
            weight_bits: bits,
            act_scheme,
            act_bits: bits,
            ..Self::fp32()
        }
    }

    /// INT4 SAWB weights with BAC activations. The transducer keeps its
    /// first encoder layer and joint network in full precision.
    pub fn int4_bac(transducer: bool) -> Self {
        let mut p = Self::uniform(4, Scheme::Sawb, ActScheme::Bac);
        if transducer {
            p.first_layer = FirstLayerPolicy::FullPrecision;
            p.quantize_heads = false;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(
            self.weight_scheme,
            Scheme::None | Scheme::Max | Scheme::Sawb
        ) {
            return Err(Error::invalid(format!(
                "weight scheme {:?} not supported (none, max or sawb)",
                self.weight_scheme
            )));
        }
        if self.weight_scheme != Scheme::None {
            self.weight_spec().validate()?;
        }
        if self.act_scheme != ActScheme::None {
            QuantSpec::new(
                Scheme::Pact,
                self.act_bits,
                self.act_levels,
                self.act_symmetry,
            )?;
        }
        Ok(())
    }

    fn weight_spec(&self) -> QuantSpec {
        QuantSpec::symmetric(self.weight_scheme, self.weight_bits, self.weight_levels)
    }

    pub fn weight_quantizer(&self) -> TensorQuantizer {
        if self.weight_scheme == Scheme::None {
            TensorQuantizer::NONE
        } else {
            TensorQuantizer::dynamic(self.weight_spec())
        }
    }

    fn learnable(&self) -> TensorQuantizer {
        let spec = QuantSpec {
            symmetry: self.act_symmetry,
            ..QuantSpec::symmetric(Scheme::Pact, self.act_bits, self.act_levels)
        };
        TensorQuantizer::learnable(spec)
    }

    fn fixed(&self, alpha: f64) -> TensorQuantizer {
        let spec = QuantSpec::symmetric(Scheme::BacFixed, self.act_bits, self.act_levels);
        TensorQuantizer::fixed(spec, ClipBounds::symmetric(alpha))
    }

    /// Activation quantizer for a tensor whose magnitude is known to stay
    /// below `known_bound` (if any).
    fn activation(&self, known: Option<f64>) -> TensorQuantizer {
        match self.act_scheme {
            ActScheme::None => TensorQuantizer::NONE,
            ActScheme::Max => TensorQuantizer::dynamic(QuantSpec::symmetric(
                Scheme::Max,
                self.act_bits,
                self.act_levels,
            )),
            ActScheme::Sawb => TensorQuantizer::dynamic(QuantSpec::symmetric(
                Scheme::Sawb,
                self.act_bits,
                self.act_levels,
            )),
            ActScheme::Pact => self.learnable(),
            ActScheme::Bac => match known {
                Some(a) => self.fixed(a),
                None => self.learnable(),
            },
        }
    }

    /// Quantizers of one LSTM layer. `stack_layer` marks layers of the
    /// bidirectional stack, where `first_layer` applies to index 0.
    pub fn lstm_layer(
        &self,
        layer_index: usize,
        input_dim: usize,
        hidden: usize,
        direction: Direction,
        dropout_p: f64,
        stack_layer: bool,
    ) -> Result<QLayerSpec> {
        let mut spec = QLayerSpec {
            layer_index,
            input_dim,
            hidden,
            direction,
            dropout_p,
            weight_q: TensorQuantizer::NONE,
            input_q: TensorQuantizer::NONE,
            hidden_q: TensorQuantizer::NONE,
        };
        let first_policy = if stack_layer {
            self.first_layer
        } else {
            FirstLayerPolicy::Learnable
        };
        if layer_index == 0 && first_policy == FirstLayerPolicy::FullPrecision {
            return Ok(spec);
        }
        let known = |role| -> Result<Option<f64>> {
            Ok(
                match bounds_bac(layer_index, role, dropout_p, first_policy)? {
                    BacBounds::Fixed(b) => Some(b.alpha_pos),
                    BacBounds::Policy(_) => None,
                },
            )
        };
        spec.weight_q = self.weight_quantizer();
        spec.input_q = self.activation(known(TensorRole::Input)?);
        spec.hidden_q = self.activation(known(TensorRole::Hidden)?);
        Ok(spec)
    }

    /// Quantizers of one FC layer. `bounded_input` marks inputs that are
    /// LSTM hidden states (|h| < 1, no dropout).
    pub fn fc(
        &self,
        in_dim: usize,
        out_dim: usize,
        bounded_input: bool,
        quantize: bool,
    ) -> QFCSpec {
        let (weight_q, act_q) = if quantize {
            (
                self.weight_quantizer(),
                self.activation(bounded_input.then_some(1.0)),
            )
        } else {
            (TensorQuantizer::NONE, TensorQuantizer::NONE)
        };
        QFCSpec {
            in_dim,
            out_dim,
            weight_q,
            act_q,
        }
    }
}
