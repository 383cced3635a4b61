use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{is_bound_param, ParamStore};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `v = μ·v + g + λ·θ; θ -= lr·v`
    SgdMomentum,
    /// Adaptive moments with decoupled weight decay.
    AdamwLike,
}

/// Optimizer hyperparameters.
///
/// Learned clip bounds form their own group: they always use adaptive
/// moments at `lr · bound_lr_scale`, with an L2 pull of strength
/// `bound_decay` toward zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub bound_lr_scale: f64,
    pub bound_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            bound_lr_scale: 1.0,
            bound_decay: 0.0,
            grad_clip: 0.0,
        }
    }
}

impl OptimizerSpec {
    pub fn adamw() -> Self {
        Self {
            kind: OptimizerKind::AdamwLike,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !unit(self.momentum) || !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::invalid("momentum and betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        for (n, v) in [
            ("weight_decay", self.weight_decay),
            ("bound_lr_scale", self.bound_lr_scale),
            ("bound_decay", self.bound_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "{n} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// Step counter plus per-parameter slots (`<name>/m`, `<name>/v`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub step: u64,
    pub slots: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn cast<U: Real>(&self) -> OptimizerState<U> {
        OptimizerState {
            step: self.step,
            slots: self
                .slots
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T: Real = f32> {
    pub spec: OptimizerSpec,
    pub state: OptimizerState<T>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(spec: OptimizerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            state: OptimizerState::default(),
        })
    }

    pub fn with_state(spec: OptimizerSpec, state: OptimizerState<T>) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, state })
    }

    fn slot(&mut self, name: &str, slot: &str, shape: &[usize]) -> &mut Tensor<T> {
        self.state
            .slots
            .entry(format!("{name}/{slot}"))
            .or_insert_with(|| Tensor::zeros(shape))
    }

    /// Apply one update with learning rate `lr`. Parameters without a
    /// gradient are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        let scale = match self.spec.grad_clip {
            c if c > 0.0 => {
                let norm = grads
                    .iter()
                    .filter(|(k, _)| !is_bound_param(k))
                    .flat_map(|(_, g)| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };
        self.state.step += 1;
        let t = self.state.step as i32;
        let s = self.spec.clone();
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| {
                Error::invalid(format!("gradient for unknown parameter `{name}`"))
            })?;
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer step", p.shape(), g.shape()));
            }
            let shape = p.shape().to_vec();
            if is_bound_param(name) {
                let lr = lr * s.bound_lr_scale;
                let m = self.slot(name, "m", &shape).data().to_vec();
                let v = self.slot(name, "v", &shape).data().to_vec();
                let (mut m2, mut v2) = (m, v);
                for i in 0..p.len() {
                    let th = p.data()[i].as_f64();
                    let gi = g.data()[i].as_f64() + s.bound_decay * th;
                    let (mi, vi) = adam_moments(&s, m2[i].as_f64(), v2[i].as_f64(), gi);
                    m2[i] = T::of(mi);
                    v2[i] = T::of(vi);
                    p.data_mut()[i] = T::of(th - lr * adam_direction(&s, mi, vi, t));
                }
                self.slot(name, "m", &shape).data_mut().copy_from_slice(&m2);
                self.slot(name, "v", &shape).data_mut().copy_from_slice(&v2);
                continue;
            }
            match s.kind {
                OptimizerKind::SgdMomentum => {
                    let mut v = self.slot(name, "v", &shape).data().to_vec();
                    for i in 0..p.len() {
                        let th = p.data()[i].as_f64();
                        let gi = scale * g.data()[i].as_f64() + s.weight_decay * th;
                        let vi = s.momentum * v[i].as_f64() + gi;
                        v[i] = T::of(vi);
                        p.data_mut()[i] = T::of(th - lr * vi);
                    }
                    self.slot(name, "v", &shape).data_mut().copy_from_slice(&v);
                }
                OptimizerKind::AdamwLike => {
                    let mut m = self.slot(name, "m", &shape).data().to_vec();
                    let mut v = self.slot(name, "v", &shape).data().to_vec();
                    for i in 0..p.len() {
                        let th = p.data()[i].as_f64();
                        let (mi, vi) = adam_moments(
                            &s,
                            m[i].as_f64(),
                            v[i].as_f64(),
                            scale * g.data()[i].as_f64(),
                        );
                        m[i] = T::of(mi);
                        v[i] = T::of(vi);
                        p.data_mut()[i] =
                            T::of(th - lr * (adam_direction(&s, mi, vi, t) + s.weight_decay * th));
                    }
                    self.slot(name, "m", &shape).data_mut().copy_from_slice(&m);
                    self.slot(name, "v", &shape).data_mut().copy_from_slice(&v);
                }
            }
        }
        Ok(())
    }
}

fn adam_moments(s: &OptimizerSpec, m: f64, v: f64, g: f64) -> (f64, f64) {
    (
        s.beta1 * m + (1.0 - s.beta1) * g,
        s.beta2 * v + (1.0 - s.beta2) * g * g,
    )
}

fn adam_direction(s: &OptimizerSpec, m: f64, v: f64, t: i32) -> f64 {
    let mh = m / (1.0 - s.beta1.powi(t));
    let vh = v / (1.0 - s.beta2.powi(t));
    mh / (vh.sqrt() + s.eps)
}
