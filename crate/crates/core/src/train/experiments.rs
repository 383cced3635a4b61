//! Desk-scale experiments on the framewise toy task: quantizer ranking,
//! fine-tuning versus training from scratch, and learned-bound convergence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    train_qat, FramewiseTask, LrSchedule, Optimizer, OptimizerSpec, TrainConfig, TrainOutcome,
};
use crate::error::Result;
use crate::models::{
    build_preset, ActScheme, ModelSpec, Network, Preset, PresetOptions, QuantPolicy,
};
use crate::numerics::Rng;
use crate::quant::{LevelMode, Scheme};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Fp32,
    Int8Max,
    Int4SawbBac,
    Int4SawbPact,
    Int4Max,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Fp32,
        Variant::Int8Max,
        Variant::Int4SawbBac,
        Variant::Int4SawbPact,
        Variant::Int4Max,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Fp32 => "FP32",
            Variant::Int8Max => "INT8-MAX",
            Variant::Int4SawbBac => "INT4-SAWB+BAC",
            Variant::Int4SawbPact => "INT4-SAWB+PACT",
            Variant::Int4Max => "INT4-MAX",
        }
    }

    pub fn policy(self) -> QuantPolicy {
        match self {
            Variant::Fp32 => QuantPolicy::fp32(),
            Variant::Int8Max => QuantPolicy::uniform(8, Scheme::Max, ActScheme::Max),
            Variant::Int4SawbBac => QuantPolicy::uniform(4, Scheme::Sawb, ActScheme::Bac),
            Variant::Int4SawbPact => QuantPolicy::uniform(4, Scheme::Sawb, ActScheme::Pact),
            Variant::Int4Max => QuantPolicy {
                weight_levels: LevelMode::Full,
                act_levels: LevelMode::Full,
                ..QuantPolicy::uniform(4, Scheme::Max, ActScheme::Max)
            },
        }
    }
}

/// Shared setup of the toy experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySetup {
    pub task: FramewiseTask,
    pub layers: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerSpec,
}

impl Default for ToySetup {
    fn default() -> Self {
        Self {
            task: FramewiseTask::default(),
            layers: 4,
            hidden: 32,
            bottleneck: 32,
            dropout: 0.2,
            epochs: 24,
            lr: 3e-3,
            optimizer: OptimizerSpec {
                bound_lr_scale: 10.0,
                bound_decay: 1e-3,
                grad_clip: 5.0,
                ..OptimizerSpec::adamw()
            },
        }
    }
}

impl ToySetup {
    /// A 4-layer BiLSTM framewise model sized for the toy task.
    pub fn spec(&self, policy: &QuantPolicy) -> Result<ModelSpec> {
        // presets scale by 1/8 from hidden 512; pick the scale that yields
        // `hidden` and undo it on the other dimensions
        let scale = self.hidden as f64 / 512.0;
        let undo = |d: usize| (d as f64 / scale).round() as usize;
        let opts = PresetOptions {
            input_dim: Some(undo(self.task.input_dim)),
            output_dim: Some(self.task.classes),
            layers: Some(self.layers),
            bottleneck: undo(self.bottleneck),
            dropout: Some(self.dropout),
            ..PresetOptions::default()
        };
        build_preset(Preset::Hmm300, scale, policy, &opts)
    }

    pub fn train(
        &self,
        net: Network<f32>,
        sched: &LrSchedule,
        epochs: usize,
        data_seed: u64,
        seed: u64,
    ) -> Result<TrainOutcome> {
        let data = self.task.generate(data_seed)?;
        let opt = Optimizer::new(self.optimizer.clone())?;
        train_qat(
            net,
            &data,
            opt,
            sched,
            &TrainConfig {
                epochs,
                seed,
                start_epoch: 0,
            },
        )
    }

    /// Train `variant` from scratch with a constant learning rate.
    pub fn run_variant(&self, variant: Variant, seed: u64) -> Result<TrainOutcome> {
        let spec = self.spec(&variant.policy())?;
        let net = Network::init(spec, &mut Rng::new(seed));
        self.train(
            net,
            &LrSchedule::Constant { lr0: self.lr },
            self.epochs,
            seed,
            seed,
        )
    }
}

/// Mean final holdout accuracy per variant over `seeds`.
pub fn quantizer_ranking(setup: &ToySetup, seeds: &[u64]) -> Result<Vec<(Variant, f64)>> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let mut acc = 0.0;
            for &s in seeds {
                let out = setup.run_variant(v, s)?;
                acc += out.metrics.last().map_or(0.0, |m| m.accuracy);
            }
            Ok((v, acc / seeds.len() as f64))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneResult {
    pub scratch: Vec<f64>,
    pub finetune: Vec<f64>,
    /// First fine-tuning epoch (1-based) whose holdout loss is at or below
    /// the scratch run's final holdout loss.
    pub epochs_to_match: Option<usize>,
}

/// QAT from scratch for `scratch_epochs` versus QAT fine-tuning from an FP32
/// model pretrained for `pretrain_epochs`, under the INT4 SAWB+BAC policy.
pub fn finetune_vs_scratch(
    setup: &ToySetup,
    seed: u64,
    pretrain_epochs: usize,
    scratch_epochs: usize,
    finetune_epochs: usize,
) -> Result<FinetuneResult> {
    let constant = LrSchedule::Constant { lr0: setup.lr };
    let policy = Variant::Int4SawbBac.policy();

    let fp = Network::init(setup.spec(&QuantPolicy::fp32())?, &mut Rng::new(seed));
    let pre = setup.train(fp, &constant, pretrain_epochs, seed, seed)?;

    let scratch_net = Network::init(setup.spec(&policy)?, &mut Rng::new(seed ^ 0x5eed));
    let scratch = setup.train(scratch_net, &constant, scratch_epochs, seed, seed + 1)?;

    let ft_net = Network::from_params(setup.spec(&policy)?, pre.network.params)?;
    let decreasing = LrSchedule::CustomDecreasing {
        lr0: setup.lr,
        lr_min: setup.lr / 40.0,
        decay_epochs: 8,
        law: super::DecayLaw::Linear,
    };
    let ft = setup.train(ft_net, &decreasing, finetune_epochs, seed, seed + 1)?;

    let scratch: Vec<f64> = scratch.metrics.iter().map(|m| m.holdout_loss).collect();
    let finetune: Vec<f64> = ft.metrics.iter().map(|m| m.holdout_loss).collect();
    let target = *scratch.last().unwrap_or(&f64::INFINITY);
    let epochs_to_match = finetune.iter().position(|&l| l <= target).map(|i| i + 1);
    Ok(FinetuneResult {
        scratch,
        finetune,
        epochs_to_match,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundTrace {
    /// Learned upper input bound of every LSTM layer after each epoch of an
    /// INT4 SAWB+PACT run, keyed by layer name.
    pub pact_inputs: Vec<BTreeMap<String, f64>>,
    /// Clipped elements per fixed hidden-state quantizer, summed over an
    /// INT4 SAWB+BAC run of the same length.
    pub fixed_hidden_clips: BTreeMap<String, u64>,
}

/// Learned-bound trajectories under PACT next to the clip counters of the
/// fixed BAC bounds, both trained from scratch for `epochs` epochs.
pub fn bound_convergence(setup: &ToySetup, seed: u64, epochs: usize) -> Result<BoundTrace> {
    let run = |v: Variant| {
        setup.train(
            Network::init(setup.spec(&v.policy())?, &mut Rng::new(seed)),
            &LrSchedule::Constant { lr0: setup.lr },
            epochs,
            seed,
            seed,
        )
    };
    let pact = run(Variant::Int4SawbPact)?;
    let pact_inputs = pact
        .metrics
        .iter()
        .map(|m| {
            m.bounds
                .iter()
                .filter_map(|(site, &v)| {
                    site.strip_prefix("lstm.")?
                        .strip_suffix(".input")
                        .map(|l| (format!("lstm.{l}"), v))
                })
                .collect()
        })
        .collect();

    let bac = run(Variant::Int4SawbBac)?;
    let fixed: Vec<String> = bac
        .network
        .spec
        .lstm_layers()
        .into_iter()
        .filter(|(_, l)| l.hidden_q.spec.scheme == Scheme::BacFixed)
        .map(|(name, _)| format!("{name}.hidden"))
        .collect();
    let mut fixed_hidden_clips: BTreeMap<String, u64> =
        fixed.iter().map(|s| (s.clone(), 0)).collect();
    for m in &bac.metrics {
        for (site, n) in fixed_hidden_clips.iter_mut() {
            *n += m.clips.get(site).map_or(0, |c| c.clipped);
        }
    }
    Ok(BoundTrace {
        pact_inputs,
        fixed_hidden_clips,
    })
}
