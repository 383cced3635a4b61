use std::collections::BTreeMap;

use super::pack::{
    check_activation_spec, check_weight_spec, int_gemm_acc, rescale, PackedNibbleMatrix,
    QuantizedActivation,
};
use crate::error::{Error, Result};
use crate::models::{Arch, ModelSpec, Network, ParamStore};
use crate::numerics::{kernels, Rng, Tape, Tensor};
use crate::qlstm::{Ctx, TensorQuantizer};
use crate::quant::{
    bounds_max, bounds_sawb, quantize_linear, ClipBounds, QuantStats, Scheme, Symmetry,
};
use crate::train::checkpoint::{Checkpoint, PackedEntry, RngState};

/// A deployable model: quantized weight matrices packed (transposed to
/// `in × out`), everything else (biases, full-precision layers, embedding,
/// learned activation bounds) in `params`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedModel {
    pub spec: ModelSpec,
    pub params: ParamStore<f32>,
    pub packed: BTreeMap<String, PackedNibbleMatrix>,
}

/// Weight matrices of the model with their quantizers, in a fixed order.
fn weight_sites(spec: &ModelSpec) -> Vec<(String, TensorQuantizer, TensorQuantizer)> {
    let mut out = Vec::new();
    for (name, l) in spec.lstm_layers() {
        for d in l.direction.names() {
            out.push((format!("{name}.{d}.W"), l.weight_q, l.input_q));
            out.push((format!("{name}.{d}.R"), l.weight_q, l.hidden_q));
        }
    }
    for (name, f) in spec.fc_layers() {
        out.push((format!("{name}.W"), f.weight_q, f.act_q));
    }
    out
}

/// Bounds a weight quantizer derives from `w`, exactly as in training.
fn weight_bounds(q: &TensorQuantizer, w: &Tensor<f32>) -> Result<ClipBounds> {
    match q.spec.scheme {
        Scheme::Max => Ok(bounds_max(w)),
        Scheme::Sawb => Ok(bounds_sawb(
            &QuantStats::of(w),
            q.spec.bits,
            q.spec.level_mode,
        )),
        Scheme::BacFixed => q
            .bounds
            .ok_or_else(|| Error::invalid("fixed weight quantizer without bounds")),
        Scheme::Pact | Scheme::None => Err(Error::PolicyMismatch(format!(
            "{:?} weight quantizer",
            q.spec.scheme
        ))),
    }
}

impl PackedModel {
    /// Pack every quantized weight matrix of `net`. Fails with
    /// [`Error::PolicyMismatch`] when a quantized layer cannot run on the
    /// integer path (weights not 4-bit odd symmetric, or quantized
    /// activations that are asymmetric or full-level).
    pub fn pack(net: &Network<f32>) -> Result<Self> {
        let mut params = net.params.clone();
        let mut packed = BTreeMap::new();
        for (name, wq, aq) in weight_sites(&net.spec) {
            if wq.is_none() {
                continue;
            }
            check_weight_spec(&wq.spec)?;
            if !aq.is_none() {
                check_activation_spec(&aq.spec)?;
            }
            let w = params
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let bounds = weight_bounds(&wq, &w)?;
            packed.insert(name, PackedNibbleMatrix::pack(&w.transpose()?, &bounds)?);
        }
        Ok(Self {
            spec: net.spec.clone(),
            params,
            packed,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec_hash: self.spec.spec_hash(),
            epoch: 0,
            rng: RngState::of(&Rng::new(0)),
            params: self.params.clone(),
            optimizer: Default::default(),
            packed: self
                .packed
                .iter()
                .map(|(k, p)| {
                    let e = PackedEntry {
                        rows: p.rows,
                        cols: p.cols,
                        scale: p.scale,
                        bytes: p.bytes.clone(),
                    };
                    (k.clone(), e)
                })
                .collect(),
        }
    }

    /// Rebuild from a packed-model checkpoint, checking that every packed
    /// and float tensor the spec needs is present with the right shape.
    pub fn from_checkpoint(spec: ModelSpec, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.spec_hash != spec.spec_hash() {
            return Err(Error::Checkpoint(format!(
                "spec hash {:016x} does not match model {:016x}",
                ckpt.spec_hash,
                spec.spec_hash()
            )));
        }
        let shapes: BTreeMap<String, Vec<usize>> = spec
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        let mut packed = BTreeMap::new();
        for (name, wq, aq) in weight_sites(&spec) {
            if wq.is_none() {
                continue;
            }
            check_weight_spec(&wq.spec)?;
            if !aq.is_none() {
                check_activation_spec(&aq.spec)?;
            }
            let e = ckpt
                .packed
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing packed tensor `{name}`")))?;
            let shape = &shapes[&name];
            if [e.cols, e.rows] != [shape[0], shape[1]] {
                return Err(Error::Checkpoint(format!(
                    "packed `{name}` is {}×{}, expected {}×{}",
                    e.rows, e.cols, shape[1], shape[0]
                )));
            }
            let m = PackedNibbleMatrix {
                rows: e.rows,
                cols: e.cols,
                scale: e.scale,
                bytes: e.bytes.clone(),
            };
            m.validate()?;
            packed.insert(name, m);
        }
        if let Some(extra) = ckpt.packed.keys().find(|k| !packed.contains_key(*k)) {
            return Err(Error::Checkpoint(format!(
                "unexpected packed tensor `{extra}`"
            )));
        }
        // float tensors: everything the spec needs that is not packed
        let mut params = ParamStore::new();
        for (name, shape) in &shapes {
            if packed.contains_key(name) {
                continue;
            }
            match ckpt.params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {
                    params.insert(name.clone(), t.clone());
                }
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
            }
        }
        Ok(Self {
            spec,
            params,
            packed,
        })
    }

    /// Total bytes of packed weight payload.
    pub fn packed_bytes(&self) -> usize {
        self.packed.values().map(|p| p.byte_len()).sum()
    }

    pub fn runtime(&self) -> Result<Runtime<'_>> {
        Runtime::new(self)
    }
}

enum Weights {
    /// `out × in`, used with real arithmetic.
    Float(Vec<f32>),
    /// `in × out` codes and scale, used with integer accumulation.
    Int { codes: Vec<i8>, scale: f32 },
}

/// One matrix product `q(x) · Wᵀ` with its activation quantizer.
struct Linear {
    site: String,
    act: TensorQuantizer,
    w: Weights,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    fn new(model: &PackedModel, name: &str, site: String, act: TensorQuantizer) -> Result<Self> {
        if let Some(p) = model.packed.get(name) {
            let w = if act.is_none() {
                // full-precision activations meet the dequantized weights
                Weights::Float(p.unpack().transpose()?.into_data())
            } else {
                Weights::Int {
                    codes: p.codes(),
                    scale: p.scale,
                }
            };
            return Ok(Self {
                site,
                act,
                w,
                in_dim: p.rows,
                out_dim: p.cols,
            });
        }
        let t = model
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        Ok(Self {
            site,
            act,
            w: Weights::Float(t.data().to_vec()),
            in_dim: t.cols(),
            out_dim: t.rows(),
        })
    }

    fn act_bounds(&self, x: &Tensor<f32>, params: &ParamStore<f32>) -> Result<ClipBounds> {
        let q = &self.act;
        let learned = |suffix: &str| -> Result<f64> {
            let name = format!("{}.{suffix}", self.site);
            params
                .get(&name)
                .map(|t| t.item() as f64)
                .ok_or_else(|| Error::Checkpoint(format!("missing learned bound `{name}`")))
        };
        match q.spec.scheme {
            Scheme::Max => Ok(bounds_max(x)),
            Scheme::Sawb => Ok(bounds_sawb(
                &QuantStats::of(x),
                q.spec.bits,
                q.spec.level_mode,
            )),
            Scheme::BacFixed => q
                .bounds
                .ok_or_else(|| Error::invalid("fixed quantizer without bounds")),
            Scheme::Pact => {
                let pos = learned("pos")?;
                Ok(match q.spec.symmetry {
                    Symmetry::Symmetric => ClipBounds::symmetric(pos),
                    Symmetry::Asymmetric => ClipBounds::asymmetric(learned("neg")?, pos),
                })
            }
            Scheme::None => unreachable!("NONE activations are not quantized"),
        }
    }

    fn apply(&self, x: &Tensor<f32>, params: &ParamStore<f32>) -> Result<Vec<f32>> {
        let m = x.rows();
        if x.cols() != self.in_dim {
            return Err(Error::shape("runtime linear", x.shape(), &[m, self.in_dim]));
        }
        let (k, n) = (self.in_dim, self.out_dim);
        match &self.w {
            Weights::Float(w) if self.act.is_none() => Ok(kernels::matmul_nt(x.data(), w, m, k, n)),
            Weights::Float(w) => {
                let b = self.act_bounds(x, params)?;
                let xq = quantize_linear(x, &b, &self.act.spec)?.values;
                Ok(kernels::matmul_nt(xq.data(), w, m, k, n))
            }
            Weights::Int { codes, scale } => {
                if !x.all_finite() {
                    return Err(Error::NonFinite {
                        op: "runtime linear",
                    });
                }
                let b = self.act_bounds(x, params)?;
                let a = QuantizedActivation::quantize(x, &b, &self.act.spec)?;
                Ok(rescale(&int_gemm_acc(&a, codes, k, n)?, a.scale, *scale))
            }
        }
    }
}

struct CellPlan {
    wx: Linear,
    wh: Linear,
    bias: Vec<f32>,
}

struct LayerPlan {
    hidden: usize,
    /// `[fwd]`, `[bwd]` or `[fwd, bwd]`.
    cells: Vec<(bool, CellPlan)>,
}

struct FcPlan {
    lin: Linear,
    bias: Vec<f32>,
}

/// Inference state built from a [`PackedModel`]: weights decoded once,
/// activation quantization and integer GEMM per call. Runs in evaluation
/// mode (no dropout).
pub struct Runtime<'m> {
    model: &'m PackedModel,
    layers: BTreeMap<String, LayerPlan>,
    fcs: BTreeMap<String, FcPlan>,
}

fn bias(model: &PackedModel, name: &str) -> Result<Vec<f32>> {
    model
        .params
        .get(name)
        .map(|t| t.data().to_vec())
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
}

impl<'m> Runtime<'m> {
    pub fn new(model: &'m PackedModel) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for (name, l) in model.spec.lstm_layers() {
            let cells = l
                .direction
                .names()
                .iter()
                .map(|d| {
                    let p = format!("{name}.{d}");
                    let cell = CellPlan {
                        wx: Linear::new(
                            model,
                            &format!("{p}.W"),
                            format!("{name}.input"),
                            l.input_q,
                        )?,
                        wh: Linear::new(
                            model,
                            &format!("{p}.R"),
                            format!("{name}.hidden"),
                            l.hidden_q,
                        )?,
                        bias: bias(model, &format!("{p}.b"))?,
                    };
                    Ok((*d == "bwd", cell))
                })
                .collect::<Result<_>>()?;
            layers.insert(
                name,
                LayerPlan {
                    hidden: l.hidden,
                    cells,
                },
            );
        }
        let mut fcs = BTreeMap::new();
        for (name, f) in model.spec.fc_layers() {
            let plan = FcPlan {
                lin: Linear::new(
                    model,
                    &format!("{name}.W"),
                    format!("{name}.input"),
                    f.act_q,
                )?,
                bias: bias(model, &format!("{name}.b"))?,
            };
            fcs.insert(name, plan);
        }
        Ok(Self { model, layers, fcs })
    }

    fn params(&self) -> &ParamStore<f32> {
        &self.model.params
    }

    fn step(
        &self,
        cell: &CellPlan,
        hidden: usize,
        x: &Tensor<f32>,
        h: &Tensor<f32>,
        c: &[f32],
    ) -> Result<(Tensor<f32>, Vec<f32>)> {
        let gx = cell.wx.apply(x, self.params())?;
        let gh = cell.wh.apply(h, self.params())?;
        let mut gates: Vec<f32> = gx.iter().zip(&gh).map(|(a, b)| a + b).collect();
        kernels::add_row(&mut gates, &cell.bias);
        let (hs, cs) = kernels::lstm_pointwise(&gates, c, hidden);
        Ok((Tensor::new(&[x.rows(), hidden], hs)?, cs))
    }

    fn run_layer(&self, name: &str, xs: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        let plan = &self.layers[name];
        let Some(first) = xs.first() else {
            return Err(Error::invalid(format!("{name}: empty sequence")));
        };
        let batch = first.rows();
        let hdim = plan.hidden;
        let mut per_dir = Vec::with_capacity(plan.cells.len());
        for (reverse, cell) in &plan.cells {
            let mut h = Tensor::zeros(&[batch, hdim]);
            let mut c = vec![0.0f32; batch * hdim];
            let mut outs = vec![Tensor::zeros(&[0]); xs.len()];
            let order: Box<dyn Iterator<Item = usize>> = if *reverse {
                Box::new((0..xs.len()).rev())
            } else {
                Box::new(0..xs.len())
            };
            for t in order {
                (h, c) = self.step(cell, hdim, &xs[t], &h, &c)?;
                outs[t] = h.clone();
            }
            per_dir.push(outs);
        }
        if per_dir.len() == 1 {
            return Ok(per_dir.pop().unwrap());
        }
        (0..xs.len())
            .map(|t| {
                let (f, b) = (&per_dir[0][t], &per_dir[1][t]);
                let mut data = Vec::with_capacity(batch * 2 * hdim);
                for r in 0..batch {
                    data.extend_from_slice(f.row(r));
                    data.extend_from_slice(b.row(r));
                }
                Tensor::new(&[batch, 2 * hdim], data)
            })
            .collect()
    }

    fn fc(&self, name: &str, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let plan = &self.fcs[name];
        let mut y = plan.lin.apply(x, self.params())?;
        kernels::add_row(&mut y, &plan.bias);
        Tensor::new(&[x.rows(), plan.lin.out_dim], y)
    }

    fn stack(&self, xs: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        let mut seq = xs.to_vec();
        for i in 0..self.model.spec.lstm_stack().len() {
            seq = self.run_layer(&self.model.spec.stack_name(i), &seq)?;
        }
        Ok(seq)
    }

    /// Framewise logits for a time-major sequence of `batch × input_dim`
    /// frames.
    pub fn framewise(&self, xs: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        let Arch::Framewise { fc, .. } = &self.model.spec.arch else {
            return Err(Error::invalid("framewise inference on a transducer"));
        };
        self.stack(xs)?
            .into_iter()
            .map(|mut y| {
                for i in 0..fc.len() {
                    y = self.fc(&format!("fc.{i}"), &y)?;
                }
                Ok(y)
            })
            .collect()
    }

    pub fn encoder(&self, xs: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        self.transducer()?;
        self.stack(xs)
    }

    fn embed(&self, step: &[usize]) -> Result<Tensor<f32>> {
        let table = self
            .model
            .params
            .get("pred.embed")
            .ok_or_else(|| Error::Checkpoint("missing tensor `pred.embed`".into()))?;
        let (vocab, dim) = (table.rows(), table.cols());
        let mut data = Vec::with_capacity(step.len() * dim);
        for &tok in step {
            if tok >= vocab {
                return Err(Error::invalid(format!(
                    "token {tok} outside vocabulary of {vocab}"
                )));
            }
            data.extend_from_slice(table.row(tok));
        }
        Tensor::new(&[step.len(), dim], data)
    }

    /// Prediction network states for time-major tokens.
    pub fn prediction(&self, tokens: &[Vec<usize>]) -> Result<Vec<Tensor<f32>>> {
        self.transducer()?;
        let xs = tokens
            .iter()
            .map(|s| self.embed(s))
            .collect::<Result<Vec<_>>>()?;
        self.run_layer("pred", &xs)
    }

    /// Joint network logits for one encoder frame and prediction state.
    pub fn joint(&self, enc: &Tensor<f32>, pred: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.transducer()?;
        let e = self.fc("joint.enc_proj", enc)?;
        let p = self.fc("joint.pred_proj", pred)?;
        if e.shape() != p.shape() {
            return Err(Error::shape("joint", e.shape(), p.shape()));
        }
        let z: Vec<f32> = e.data().iter().zip(p.data()).map(|(a, b)| a * b).collect();
        self.fc("joint.out", &Tensor::new(e.shape(), z)?)
    }

    /// Next-symbol logits of the prediction network with the encoder factor
    /// fixed to one.
    pub fn lm_logits(&self, tokens: &[Vec<usize>]) -> Result<Vec<Tensor<f32>>> {
        self.prediction(tokens)?
            .into_iter()
            .map(|h| self.fc("joint.out", &self.fc("joint.pred_proj", &h)?))
            .collect()
    }

    /// Greedy next-symbol decoding from `start` (one symbol per batch row)
    /// for `steps` steps, carrying the recurrent state. Returns time-major
    /// symbols.
    pub fn greedy_lm(&self, start: &[usize], steps: usize) -> Result<Vec<Vec<usize>>> {
        self.transducer()?;
        let plan = &self.layers["pred"];
        let (reverse, cell) = &plan.cells[0];
        if plan.cells.len() != 1 || *reverse {
            return Err(Error::invalid(
                "greedy decoding needs a forward prediction network",
            ));
        }
        let batch = start.len();
        let mut h = Tensor::zeros(&[batch, plan.hidden]);
        let mut c = vec![0.0f32; batch * plan.hidden];
        let mut cur = start.to_vec();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            (h, c) = self.step(cell, plan.hidden, &self.embed(&cur)?, &h, &c)?;
            let logits = self.fc("joint.out", &self.fc("joint.pred_proj", &h)?)?;
            cur = argmax_rows(&logits);
            out.push(cur.clone());
        }
        Ok(out)
    }

    fn transducer(&self) -> Result<()> {
        if self.model.spec.is_transducer() {
            Ok(())
        } else {
            Err(Error::invalid("transducer inference on a framewise model"))
        }
    }
}

pub fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    let n = t.cols();
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            (0..n).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

/// Fake-quantization reference forwards on the training tape, in
/// evaluation mode.
pub mod reference {
    use super::*;

    fn run<F>(net: &Network<f32>, f: F) -> Result<Vec<Tensor<f32>>>
    where
        F: FnOnce(&mut Ctx<'_, f32>, &crate::models::Binding) -> Result<Vec<crate::numerics::Var>>,
    {
        let tape = Tape::new();
        let b = net.bind(&tape, false);
        let mut ctx = Ctx::new(&tape, Rng::new(0), false);
        let vars = f(&mut ctx, &b)?;
        Ok(vars.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    pub fn framewise(net: &Network<f32>, xs: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        run(net, |ctx, b| {
            let vs: Vec<_> = xs.iter().map(|x| ctx.tape.constant(x.clone())).collect();
            net.framewise(ctx, b, &vs)
        })
    }

    pub fn encoder(net: &Network<f32>, xs: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        run(net, |ctx, b| {
            let vs: Vec<_> = xs.iter().map(|x| ctx.tape.constant(x.clone())).collect();
            net.encoder(ctx, b, &vs)
        })
    }

    pub fn lm_logits(net: &Network<f32>, tokens: &[Vec<usize>]) -> Result<Vec<Tensor<f32>>> {
        run(net, |ctx, b| net.lm_logits(ctx, b, tokens))
    }

    /// Greedy decoding by re-running the growing prefix each step.
    pub fn greedy_lm(net: &Network<f32>, start: &[usize], steps: usize) -> Result<Vec<Vec<usize>>> {
        let mut seq = vec![start.to_vec()];
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let logits = lm_logits(net, &seq)?;
            let next = argmax_rows(logits.last().expect("non-empty prefix"));
            seq.push(next.clone());
            out.push(next);
        }
        Ok(out)
    }
}
