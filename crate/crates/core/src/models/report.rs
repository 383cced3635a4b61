use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Arch, ModelSpec};
use crate::qlstm::TensorQuantizer;

/// Storage precision class of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Precision {
    Int(u32),
    Full,
}

impl Precision {
    pub fn of(q: &TensorQuantizer) -> Self {
        if q.is_none() {
            Precision::Full
        } else {
            Precision::Int(q.spec.bits)
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Int(b) => write!(f, "int{b}"),
            Precision::Full => f.write_str("fp32"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Weight,
    Bias,
    Embedding,
    /// A learned clip bound (one element).
    Bound,
}

/// One parameter tensor as enumerated by model introspection.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    pub quantizer: TensorQuantizer,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        Precision::of(&self.quantizer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationRole {
    LstmInput,
    LstmHidden,
    CellState,
    FcInput,
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationInfo {
    pub name: String,
    pub role: ActivationRole,
    pub quantizer: TensorQuantizer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    Prediction,
    Joint,
    /// FC layers of a framewise model.
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub name: String,
    pub component: Component,
    pub macs: u64,
    /// Weight precision of the layer.
    pub precision: Precision,
}

/// Multiply-accumulate counts per layer for `frames` encoder frames and
/// `pred_calls` prediction-network evaluations (hypothesis × step pairs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentMacs {
    pub layers: Vec<LayerMacs>,
}

impl ComponentMacs {
    pub fn component(&self, c: Component) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.component == c)
            .map(|l| l.macs)
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub name: String,
    pub component: Component,
    pub params: usize,
    pub weight_params: usize,
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub model: String,
    pub layers: Vec<LayerParams>,
    pub total: usize,
    pub by_component: BTreeMap<Component, usize>,
    /// Parameter counts per precision class; biases and embeddings are fp32.
    pub by_precision: BTreeMap<String, usize>,
    pub fractions: BTreeMap<String, f64>,
    pub quantized_fraction: f64,
    pub first_layer_fraction: f64,
    pub seq_len: usize,
    pub beam: usize,
    pub first_layer_compute_fraction: f64,
    pub compute_fractions: BTreeMap<Component, f64>,
}

impl ModelSpec {
    /// Every parameter tensor with its shape and quantizer, in a fixed order.
    pub fn tensors(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        let t = |name: String, shape: Vec<usize>, kind, quantizer| TensorInfo {
            name,
            shape,
            kind,
            quantizer,
        };
        for (name, l) in self.lstm_layers() {
            for dir in l.direction.names() {
                let p = format!("{name}.{dir}");
                let h4 = 4 * l.hidden;
                out.push(t(
                    format!("{p}.W"),
                    vec![h4, l.input_dim],
                    TensorKind::Weight,
                    l.weight_q,
                ));
                out.push(t(
                    format!("{p}.R"),
                    vec![h4, l.hidden],
                    TensorKind::Weight,
                    l.weight_q,
                ));
                out.push(t(
                    format!("{p}.b"),
                    vec![h4],
                    TensorKind::Bias,
                    TensorQuantizer::NONE,
                ));
            }
            for (role, q) in [("input", &l.input_q), ("hidden", &l.hidden_q)] {
                push_bounds(&mut out, &format!("{name}.{role}"), q);
            }
        }
        if let Arch::Transducer { embed, .. } = &self.arch {
            out.push(t(
                "pred.embed".into(),
                vec![embed.vocab, embed.dim],
                TensorKind::Embedding,
                TensorQuantizer::NONE,
            ));
        }
        for (name, f) in self.fc_layers() {
            out.push(t(
                format!("{name}.W"),
                vec![f.out_dim, f.in_dim],
                TensorKind::Weight,
                f.weight_q,
            ));
            out.push(t(
                format!("{name}.b"),
                vec![f.out_dim],
                TensorKind::Bias,
                TensorQuantizer::NONE,
            ));
            push_bounds(&mut out, &format!("{name}.input"), &f.act_q);
        }
        out
    }

    /// Every activation site with its quantizer.
    pub fn activations(&self) -> Vec<ActivationInfo> {
        let mut out = Vec::new();
        let a = |name: String, role, quantizer| ActivationInfo {
            name,
            role,
            quantizer,
        };
        for (name, l) in self.lstm_layers() {
            out.push(a(
                format!("{name}.input"),
                ActivationRole::LstmInput,
                l.input_q,
            ));
            out.push(a(
                format!("{name}.hidden"),
                ActivationRole::LstmHidden,
                l.hidden_q,
            ));
            out.push(a(
                format!("{name}.cell"),
                ActivationRole::CellState,
                TensorQuantizer::NONE,
            ));
        }
        for (name, f) in self.fc_layers() {
            out.push(a(format!("{name}.input"), ActivationRole::FcInput, f.act_q));
        }
        out.push(a(
            "output.softmax".into(),
            ActivationRole::Softmax,
            TensorQuantizer::NONE,
        ));
        out
    }

    /// MAC counts; see [`ComponentMacs`].
    pub fn macs(&self, frames: usize, pred_calls: usize) -> ComponentMacs {
        let (f, p) = (frames as u64, pred_calls as u64);
        let mut layers = Vec::new();
        let stack_component = Component::Encoder;
        for (i, l) in self.lstm_stack().iter().enumerate() {
            let per = (4 * l.hidden * (l.input_dim + l.hidden) * l.direction.count()) as u64;
            layers.push(LayerMacs {
                name: self.stack_name(i),
                component: stack_component,
                macs: f * per,
                precision: Precision::of(&l.weight_q),
            });
        }
        match &self.arch {
            Arch::Framewise { fc, .. } => {
                for (i, l) in fc.iter().enumerate() {
                    layers.push(LayerMacs {
                        name: format!("fc.{i}"),
                        component: Component::Head,
                        macs: f * (l.in_dim * l.out_dim) as u64,
                        precision: Precision::of(&l.weight_q),
                    });
                }
            }
            Arch::Transducer {
                prediction, joint, ..
            } => {
                let l = prediction;
                layers.push(LayerMacs {
                    name: "pred".into(),
                    component: Component::Prediction,
                    macs: p * (4 * l.hidden * (l.input_dim + l.hidden)) as u64,
                    precision: Precision::of(&l.weight_q),
                });
                let fc = |name: &str, spec: &crate::qlstm::QFCSpec, n: u64| LayerMacs {
                    name: name.into(),
                    component: Component::Joint,
                    macs: n * (spec.in_dim * spec.out_dim) as u64,
                    precision: Precision::of(&spec.weight_q),
                };
                layers.push(fc("joint.enc_proj", &joint.enc_proj, f));
                layers.push(fc("joint.pred_proj", &joint.pred_proj, p));
                // elementwise combine, one multiply per joint unit
                layers.push(LayerMacs {
                    name: "joint.combine".into(),
                    component: Component::Joint,
                    macs: p * joint.out.in_dim as u64,
                    precision: Precision::Full,
                });
                layers.push(fc("joint.out", &joint.out, p));
            }
        }
        ComponentMacs { layers }
    }
}

fn push_bounds(out: &mut Vec<TensorInfo>, site: &str, q: &TensorQuantizer) {
    if !q.is_learnable() {
        return;
    }
    let mut names = vec![format!("{site}.pos")];
    if q.spec.symmetry == crate::quant::Symmetry::Asymmetric {
        names.push(format!("{site}.neg"));
    }
    for name in names {
        out.push(TensorInfo {
            name,
            shape: vec![1],
            kind: TensorKind::Bound,
            quantizer: TensorQuantizer::NONE,
        });
    }
}

/// Parameter accounting by direct summation over layer dimensions.
///
/// Counts come from the layer specs, independently of
/// [`ModelSpec::tensors`]. Compute fractions use `seq_len` frames and one
/// prediction step per frame for each of `beam` hypotheses.
pub fn param_report(spec: &ModelSpec, seq_len: usize, beam: usize) -> ParamReport {
    let mut layers = Vec::new();
    for (name, l) in spec.lstm_layers() {
        let (wr, b) = l.params_per_direction();
        let dirs = l.direction.count();
        layers.push(LayerParams {
            component: if name == "pred" {
                Component::Prediction
            } else {
                Component::Encoder
            },
            name,
            params: dirs * (wr + b),
            weight_params: dirs * wr,
            precision: Precision::of(&l.weight_q),
        });
    }
    if let Arch::Transducer { embed, .. } = &spec.arch {
        layers.push(LayerParams {
            name: "pred.embed".into(),
            component: Component::Prediction,
            params: embed.vocab * embed.dim,
            weight_params: 0,
            precision: Precision::Full,
        });
    }
    for (name, f) in spec.fc_layers() {
        layers.push(LayerParams {
            component: if spec.is_transducer() {
                Component::Joint
            } else {
                Component::Head
            },
            name,
            params: f.in_dim * f.out_dim + f.out_dim,
            weight_params: f.in_dim * f.out_dim,
            precision: Precision::of(&f.weight_q),
        });
    }

    let total: usize = layers.iter().map(|l| l.params).sum();
    let mut by_component = BTreeMap::new();
    let mut by_precision: BTreeMap<String, usize> = BTreeMap::new();
    for l in &layers {
        *by_component.entry(l.component).or_insert(0) += l.params;
        *by_precision.entry(l.precision.to_string()).or_insert(0) += l.weight_params;
        *by_precision.entry(Precision::Full.to_string()).or_insert(0) += l.params - l.weight_params;
    }
    let fractions: BTreeMap<String, f64> = by_precision
        .iter()
        .map(|(k, &v)| (k.clone(), v as f64 / total as f64))
        .collect();
    let quantized_fraction = 1.0 - fractions.get("fp32").copied().unwrap_or(0.0);
    let first_layer_fraction = layers[0].params as f64 / total as f64;

    let macs = spec.macs(seq_len, seq_len * beam);
    let all = macs.total() as f64;
    let compute_fractions = [
        Component::Encoder,
        Component::Prediction,
        Component::Joint,
        Component::Head,
    ]
    .into_iter()
    .map(|c| (c, macs.component(c) as f64 / all))
    .filter(|(_, v)| *v > 0.0)
    .collect();
    ParamReport {
        model: spec.name.clone(),
        total,
        by_component,
        by_precision,
        fractions,
        quantized_fraction,
        first_layer_fraction,
        seq_len,
        beam,
        first_layer_compute_fraction: macs.layers[0].macs as f64 / all,
        compute_fractions,
        layers,
    }
}
