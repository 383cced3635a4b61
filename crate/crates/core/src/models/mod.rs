//! Architecture presets, quantization policies and parameter accounting.
//!
//! Two architectures are supported:
//!
//! * framewise: a stack of BiLSTM layers followed by two FC layers in a
//!   bottleneck configuration (the DBLSTM acoustic models);
//! * transducer: a BiLSTM encoder, an embedding plus unidirectional LSTM
//!   prediction network, and a multiplicative joint network.
//!
//! Tensor and quantizer names follow one scheme everywhere (parameter store,
//! clip probes, checkpoints): `lstm.{i}`, `fc.{i}`, `enc.{i}`, `pred`,
//! `pred.embed`, `joint.enc_proj`, `joint.pred_proj`, `joint.out`.

mod network;
mod policy;
mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qlstm::{Direction, QFCSpec, QLayerSpec, TensorQuantizer};

pub use network::{is_bound_param, Binding, Network, ParamStore};
pub use policy::{ActScheme, QuantPolicy};
pub use report::{
    param_report, ActivationInfo, ActivationRole, Component, ComponentMacs, LayerMacs, LayerParams,
    ParamReport, Precision, TensorInfo, TensorKind,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Hmm300,
    Hmm2000,
    Rnnt,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hmm300" => Ok(Preset::Hmm300),
            "hmm2000" => Ok(Preset::Hmm2000),
            "rnnt" => Ok(Preset::Rnnt),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Hmm300 => "hmm300",
            Preset::Hmm2000 => "hmm2000",
            Preset::Rnnt => "rnnt",
        })
    }
}

/// Knobs the presets leave open. `None` keeps the preset value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PresetOptions {
    /// DBLSTM bottleneck width (scaled).
    pub bottleneck: usize,
    /// Prediction network embedding width (not scaled).
    pub embed_dim: usize,
    /// Joint projection width (scaled).
    pub joint_dim: usize,
    pub dropout: Option<f64>,
    /// Override the (unscaled) output class count.
    pub output_dim: Option<usize>,
    /// Override the (unscaled) feature dimension.
    pub input_dim: Option<usize>,
    /// Override the number of BiLSTM layers.
    pub layers: Option<usize>,
}

impl Default for PresetOptions {
    fn default() -> Self {
        Self {
            bottleneck: 256,
            embed_dim: 10,
            joint_dim: 256,
            dropout: None,
            output_dim: None,
            input_dim: None,
            layers: None,
        }
    }
}

/// Token embedding feeding the prediction network. Never quantized.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedSpec {
    pub vocab: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointSpec {
    pub enc_proj: QFCSpec,
    pub pred_proj: QFCSpec,
    pub out: QFCSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Arch {
    Framewise {
        lstm: Vec<QLayerSpec>,
        fc: Vec<QFCSpec>,
    },
    Transducer {
        encoder: Vec<QLayerSpec>,
        embed: EmbedSpec,
        prediction: QLayerSpec,
        joint: JointSpec,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub preset: Preset,
    pub scale: f64,
    pub input_dim: usize,
    pub output_dim: usize,
    pub policy: QuantPolicy,
    pub arch: Arch,
}

/// Scale a dimension and round to a multiple of 8 (at least 8).
pub fn scale_dim(d: usize, scale: f64) -> usize {
    if scale == 1.0 {
        return d;
    }
    let v = (d as f64 * scale / 8.0).round() as usize * 8;
    v.max(8)
}

/// Instantiate a preset at `scale` under `policy`.
///
/// Hidden, input, bottleneck and joint widths scale; layer counts, output
/// classes and the embedding width do not.
pub fn build_preset(
    preset: Preset,
    scale: f64,
    policy: &QuantPolicy,
    opts: &PresetOptions,
) -> Result<ModelSpec> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::invalid(format!("scale {scale} not in (0, 1]")));
    }
    policy.validate()?;
    let (input, layers, hidden, output, dropout) = match preset {
        Preset::Hmm300 => (140, 4, 512, 32000, 0.25),
        Preset::Hmm2000 => (260, 6, 512, 32000, 0.25),
        Preset::Rnnt => (340, 6, 640, 46, 0.2),
    };
    let input_dim = scale_dim(opts.input_dim.unwrap_or(input), scale);
    let layers = opts.layers.unwrap_or(layers);
    let hidden = scale_dim(hidden, scale);
    let output_dim = opts.output_dim.unwrap_or(output);
    let dropout = opts.dropout.unwrap_or(dropout);
    if layers == 0 || output_dim == 0 || opts.embed_dim == 0 {
        return Err(Error::invalid(
            "layer count, output and embedding sizes must be positive",
        ));
    }

    let stack = |stack_layer: bool| -> Result<Vec<QLayerSpec>> {
        (0..layers)
            .map(|i| {
                let d_in = if i == 0 { input_dim } else { 2 * hidden };
                policy.lstm_layer(
                    i,
                    d_in,
                    hidden,
                    Direction::Bidirectional,
                    dropout,
                    stack_layer,
                )
            })
            .collect()
    };

    let arch = match preset {
        Preset::Hmm300 | Preset::Hmm2000 => {
            let bottleneck = scale_dim(opts.bottleneck, scale);
            Arch::Framewise {
                lstm: stack(true)?,
                fc: vec![
                    policy.fc(2 * hidden, bottleneck, true, policy.quantize_heads),
                    policy.fc(bottleneck, output_dim, false, policy.quantize_heads),
                ],
            }
        }
        Preset::Rnnt => {
            let pred_hidden = scale_dim(768, scale);
            let joint = scale_dim(opts.joint_dim, scale);
            let prediction = if policy.quantize_prediction {
                policy.lstm_layer(
                    0,
                    opts.embed_dim,
                    pred_hidden,
                    Direction::Forward,
                    dropout,
                    false,
                )?
            } else {
                QLayerSpec {
                    layer_index: 0,
                    input_dim: opts.embed_dim,
                    hidden: pred_hidden,
                    direction: Direction::Forward,
                    dropout_p: dropout,
                    weight_q: TensorQuantizer::NONE,
                    input_q: TensorQuantizer::NONE,
                    hidden_q: TensorQuantizer::NONE,
                }
            };
            Arch::Transducer {
                encoder: stack(true)?,
                embed: EmbedSpec {
                    vocab: output_dim,
                    dim: opts.embed_dim,
                },
                prediction,
                joint: JointSpec {
                    enc_proj: policy.fc(2 * hidden, joint, true, policy.quantize_heads),
                    pred_proj: policy.fc(pred_hidden, joint, true, policy.quantize_heads),
                    out: policy.fc(joint, output_dim, false, policy.quantize_heads),
                },
            }
        }
    };
    Ok(ModelSpec {
        name: if scale == 1.0 {
            preset.to_string()
        } else {
            format!("{preset}@{scale}")
        },
        preset,
        scale,
        input_dim,
        output_dim,
        policy: policy.clone(),
        arch,
    })
}

impl ModelSpec {
    /// The bidirectional stack (DBLSTM layers or the transducer encoder).
    pub fn lstm_stack(&self) -> &[QLayerSpec] {
        match &self.arch {
            Arch::Framewise { lstm, .. } => lstm,
            Arch::Transducer { encoder, .. } => encoder,
        }
    }

    /// Name prefix of stack layer `i`.
    pub fn stack_name(&self, i: usize) -> String {
        match self.arch {
            Arch::Framewise { .. } => format!("lstm.{i}"),
            Arch::Transducer { .. } => format!("enc.{i}"),
        }
    }

    pub fn is_transducer(&self) -> bool {
        matches!(self.arch, Arch::Transducer { .. })
    }

    /// Every LSTM layer with its name, stack first.
    pub fn lstm_layers(&self) -> Vec<(String, &QLayerSpec)> {
        let mut out: Vec<_> = self
            .lstm_stack()
            .iter()
            .enumerate()
            .map(|(i, l)| (self.stack_name(i), l))
            .collect();
        if let Arch::Transducer { prediction, .. } = &self.arch {
            out.push(("pred".to_string(), prediction));
        }
        out
    }

    /// Every FC layer with its name.
    pub fn fc_layers(&self) -> Vec<(String, &QFCSpec)> {
        match &self.arch {
            Arch::Framewise { fc, .. } => fc
                .iter()
                .enumerate()
                .map(|(i, f)| (format!("fc.{i}"), f))
                .collect(),
            Arch::Transducer { joint, .. } => vec![
                ("joint.enc_proj".to_string(), &joint.enc_proj),
                ("joint.pred_proj".to_string(), &joint.pred_proj),
                ("joint.out".to_string(), &joint.out),
            ],
        }
    }

    /// 64-bit FNV-1a over tensor names and shapes. Quantizer choices do not
    /// enter the hash, so a full-precision checkpoint matches a quantized
    /// spec of the same architecture.
    pub fn spec_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for t in self.tensors() {
            if t.kind == TensorKind::Bound {
                continue;
            }
            eat(t.name.as_bytes());
            for d in &t.shape {
                eat(&(*d as u64).to_le_bytes());
            }
            eat(b";");
        }
        h
    }
}

#[cfg(test)]
mod tests;
