use std::collections::BTreeMap;

use super::{Arch, ModelSpec, TensorInfo, TensorKind};
use crate::error::{Error, Result};
use crate::numerics::{Real, Rng, Tape, Tensor, Var};
use crate::qlstm::{
    run_fc, run_layer, CellParams, Ctx, FcBinding, LayerBinding, QFCSpec, QLayerSpec,
    TensorQuantizer,
};
use crate::quant::{LearnedBounds, Symmetry};

/// Named parameter tensors, including learned clip bounds.
pub type ParamStore<T> = BTreeMap<String, Tensor<T>>;

/// Learned clip bounds are stored as `<site>.pos` / `<site>.neg`.
pub fn is_bound_param(name: &str) -> bool {
    name.ends_with(".pos") || name.ends_with(".neg")
}

/// A model spec together with its parameter values.
#[derive(Clone, Debug)]
pub struct Network<T: Real = f32> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
}

fn init_tensor<T: Real>(info: &TensorInfo, rng: &mut Rng) -> Tensor<T> {
    let shape = &info.shape;
    match info.kind {
        TensorKind::Weight => {
            // LSTM: 1/sqrt(hidden); FC: 1/sqrt(fan_in)
            let fan = if info.name.ends_with(".W") && !is_lstm(&info.name) {
                shape[1]
            } else {
                shape[0] / 4
            };
            Tensor::uniform(shape, 1.0 / (fan as f64).sqrt(), rng)
        }
        TensorKind::Bias => {
            let mut b = Tensor::zeros(shape);
            if is_lstm(&info.name) {
                let h = shape[0] / 4;
                b.data_mut()[h..2 * h].fill(T::one());
            }
            b
        }
        TensorKind::Embedding => Tensor::uniform(shape, 1.0, rng),
        TensorKind::Bound => Tensor::scalar(T::zero()),
    }
}

fn is_lstm(name: &str) -> bool {
    name.contains(".fwd.") || name.contains(".bwd.")
}

/// Initial values of learned bounds, keyed by parameter name.
fn initial_bounds<T: Real>(spec: &ModelSpec) -> BTreeMap<String, Tensor<T>> {
    let mut out = BTreeMap::new();
    let mut add = |site: String, q: &TensorQuantizer| {
        if let (true, Some(b)) = (q.is_learnable(), q.bounds) {
            out.insert(format!("{site}.pos"), Tensor::scalar(T::of(b.alpha_pos)));
            if q.spec.symmetry == Symmetry::Asymmetric {
                out.insert(format!("{site}.neg"), Tensor::scalar(T::of(b.alpha_neg)));
            }
        }
    };
    for (name, l) in spec.lstm_layers() {
        add(format!("{name}.input"), &l.input_q);
        add(format!("{name}.hidden"), &l.hidden_q);
    }
    for (name, f) in spec.fc_layers() {
        add(format!("{name}.input"), &f.act_q);
    }
    out
}

impl<T: Real> Network<T> {
    /// Uniform `±1/sqrt(fan)` weights, zero biases with forget-gate bias 1,
    /// learned bounds at their initial value. Deterministic given `rng`.
    pub fn init(spec: ModelSpec, rng: &mut Rng) -> Self {
        let bounds = initial_bounds::<T>(&spec);
        let mut params = ParamStore::new();
        for info in spec.tensors() {
            let t = match bounds.get(&info.name) {
                Some(b) => b.clone(),
                None => init_tensor(&info, rng),
            };
            params.insert(info.name, t);
        }
        Self { spec, params }
    }

    /// Adopt existing parameters. Every architecture tensor must be present
    /// with the right shape; learned bounds missing from `params` start at
    /// their initial value and bounds the spec does not use are dropped.
    pub fn from_params(spec: ModelSpec, mut params: ParamStore<T>) -> Result<Self> {
        let bounds = initial_bounds::<T>(&spec);
        let mut out = ParamStore::new();
        for info in spec.tensors() {
            let t = match (params.remove(&info.name), bounds.get(&info.name)) {
                (Some(t), _) => t,
                (None, Some(b)) => b.clone(),
                (None, None) => {
                    return Err(Error::Checkpoint(format!("missing tensor `{}`", info.name)))
                }
            };
            if t.shape() != info.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    info.name,
                    t.shape(),
                    info.shape
                )));
            }
            out.insert(info.name, t);
        }
        if let Some(extra) = params.keys().find(|k| !is_bound_param(k)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self { spec, params: out })
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Put every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }

    /// Run the bidirectional stack over a time-major sequence.
    pub fn stack(&self, ctx: &mut Ctx<'_, T>, b: &Binding, xs: &[Var]) -> Result<Vec<Var>> {
        let mut seq = xs.to_vec();
        for (i, l) in self.spec.lstm_stack().iter().enumerate() {
            let name = self.spec.stack_name(i);
            seq = run_layer(ctx, &name, &seq, l, &b.layer(&name, l)?)?;
        }
        Ok(seq)
    }

    /// Framewise logits (before softmax) for every time step.
    pub fn framewise(&self, ctx: &mut Ctx<'_, T>, b: &Binding, xs: &[Var]) -> Result<Vec<Var>> {
        let Arch::Framewise { fc, .. } = &self.spec.arch else {
            return Err(Error::invalid("framewise forward on a transducer"));
        };
        let seq = self.stack(ctx, b, xs)?;
        let fcb: Vec<FcBinding> = fc
            .iter()
            .enumerate()
            .map(|(i, f)| b.fc(&format!("fc.{i}"), f))
            .collect::<Result<_>>()?;
        seq.into_iter()
            .map(|mut y| {
                for (i, (f, fb)) in fc.iter().zip(&fcb).enumerate() {
                    y = run_fc(ctx, &format!("fc.{i}"), y, f, fb)?;
                }
                Ok(y)
            })
            .collect()
    }

    /// Transducer encoder output per frame.
    pub fn encoder(&self, ctx: &mut Ctx<'_, T>, b: &Binding, xs: &[Var]) -> Result<Vec<Var>> {
        self.transducer()?;
        self.stack(ctx, b, xs)
    }

    /// Prediction network states for a time-major token sequence
    /// (`tokens[t][batch]`).
    pub fn prediction(
        &self,
        ctx: &mut Ctx<'_, T>,
        b: &Binding,
        tokens: &[Vec<usize>],
    ) -> Result<Vec<Var>> {
        let (_, embed_dim, prediction) = self.transducer()?;
        let table = b.var("pred.embed")?;
        let vocab = ctx.tape.shape(table)[0];
        let mut xs = Vec::with_capacity(tokens.len());
        for step in tokens {
            if let Some(&bad) = step.iter().find(|&&t| t >= vocab) {
                return Err(Error::invalid(format!(
                    "token {bad} outside vocabulary of {vocab}"
                )));
            }
            let x = ctx.tape.gather_rows(table, step)?;
            debug_assert_eq!(ctx.tape.shape(x)[1], embed_dim);
            xs.push(x);
        }
        run_layer(ctx, "pred", &xs, prediction, &b.layer("pred", prediction)?)
    }

    /// Joint network: `out(enc_proj(e) ⊙ pred_proj(p))`, logits before
    /// log-softmax.
    pub fn joint(&self, ctx: &mut Ctx<'_, T>, b: &Binding, enc: Var, pred: Var) -> Result<Var> {
        let (joint, _, _) = self.transducer()?;
        let e = run_fc(
            ctx,
            "joint.enc_proj",
            enc,
            &joint.enc_proj,
            &b.fc("joint.enc_proj", &joint.enc_proj)?,
        )?;
        let p = run_fc(
            ctx,
            "joint.pred_proj",
            pred,
            &joint.pred_proj,
            &b.fc("joint.pred_proj", &joint.pred_proj)?,
        )?;
        let z = ctx.tape.mul(e, p)?;
        run_fc(
            ctx,
            "joint.out",
            z,
            &joint.out,
            &b.fc("joint.out", &joint.out)?,
        )
    }

    /// Next-symbol logits of the prediction network alone: the joint
    /// network with the encoder factor fixed to one.
    pub fn lm_logits(
        &self,
        ctx: &mut Ctx<'_, T>,
        b: &Binding,
        tokens: &[Vec<usize>],
    ) -> Result<Vec<Var>> {
        let (joint, _, _) = self.transducer()?;
        let states = self.prediction(ctx, b, tokens)?;
        let pb = b.fc("joint.pred_proj", &joint.pred_proj)?;
        let ob = b.fc("joint.out", &joint.out)?;
        states
            .into_iter()
            .map(|h| {
                let p = run_fc(ctx, "joint.pred_proj", h, &joint.pred_proj, &pb)?;
                run_fc(ctx, "joint.out", p, &joint.out, &ob)
            })
            .collect()
    }

    fn transducer(&self) -> Result<(&super::JointSpec, usize, &QLayerSpec)> {
        match &self.spec.arch {
            Arch::Transducer {
                joint,
                embed,
                prediction,
                ..
            } => Ok((joint, embed.dim, prediction)),
            Arch::Framewise { .. } => {
                Err(Error::invalid("transducer forward on a framewise model"))
            }
        }
    }
}

/// Tape handles of a [`Network`]'s parameters.
#[derive(Clone, Debug)]
pub struct Binding {
    pub vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no parameter `{name}`")))
    }

    fn bounds(&self, site: &str, q: &TensorQuantizer) -> Result<Option<LearnedBounds>> {
        if !q.is_learnable() {
            return Ok(None);
        }
        let neg = match q.spec.symmetry {
            Symmetry::Symmetric => None,
            Symmetry::Asymmetric => Some(self.var(&format!("{site}.neg"))?),
        };
        Ok(Some(LearnedBounds {
            pos: self.var(&format!("{site}.pos"))?,
            neg,
        }))
    }

    pub fn layer(&self, name: &str, l: &QLayerSpec) -> Result<LayerBinding> {
        let cells = l
            .direction
            .names()
            .iter()
            .map(|d| {
                Ok(CellParams {
                    w: self.var(&format!("{name}.{d}.W"))?,
                    r: self.var(&format!("{name}.{d}.R"))?,
                    b: self.var(&format!("{name}.{d}.b"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(LayerBinding {
            cells,
            input: self.bounds(&format!("{name}.input"), &l.input_q)?,
            hidden: self.bounds(&format!("{name}.hidden"), &l.hidden_q)?,
        })
    }

    pub fn fc(&self, name: &str, f: &QFCSpec) -> Result<FcBinding> {
        Ok(FcBinding {
            w: self.var(&format!("{name}.W"))?,
            b: self.var(&format!("{name}.b"))?,
            act: self.bounds(&format!("{name}.input"), &f.act_q)?,
        })
    }
}
