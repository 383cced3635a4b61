//! Run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use qlstm4::models::{build_preset, ModelSpec, Preset, PresetOptions, QuantPolicy};
use qlstm4::train::{Dataset, FramewiseTask, LrSchedule, OptimizerSpec, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Everything a training, packing or inference run needs.
///
/// Unknown keys anywhere in the file are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of initialization, dropout and batch shuffling.
    #[serde(default = "one")]
    pub seed: u64,
    /// Seed of the synthetic dataset. Defaults to `seed`.
    #[serde(default)]
    pub data_seed: Option<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub policy: QuantPolicy,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerSpec,
    #[serde(default = "default_schedule")]
    pub schedule: LrSchedule,
    #[serde(default = "default_task")]
    pub task: TaskSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Width multiplier applied to the preset (0, 1].
    pub scale: f64,
    /// Preset overrides. Input and output sizes default to the task's.
    pub options: PresetOptions,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Hmm300,
            scale: 0.0625,
            options: PresetOptions {
                bottleneck: 512,
                dropout: Some(0.2),
                ..PresetOptions::default()
            },
        }
    }
}

fn one() -> u64 {
    1
}

fn default_epochs() -> usize {
    12
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_optimizer() -> OptimizerSpec {
    OptimizerSpec {
        bound_lr_scale: 10.0,
        bound_decay: 1e-3,
        grad_clip: 5.0,
        ..OptimizerSpec::adamw()
    }
}

fn default_schedule() -> LrSchedule {
    LrSchedule::Constant { lr0: 3e-3 }
}

fn default_task() -> TaskSpec {
    TaskSpec::Framewise(FramewiseTask::default())
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: one(),
            data_seed: None,
            epochs: default_epochs(),
            out_dir: default_out(),
            model: ModelConfig::default(),
            policy: QuantPolicy::default(),
            optimizer: default_optimizer(),
            schedule: default_schedule(),
            task: default_task(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate().map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Semantic checks that need more than one field.
    pub fn validate(&self) -> qlstm4::Result<()> {
        self.policy.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        match &self.task {
            TaskSpec::Framewise(t) => t.validate()?,
            TaskSpec::Grammar(_) => {}
        }
        self.model_spec().map(|_| ())
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    /// The model described by `[model]` and `[policy]`, sized to the task.
    pub fn model_spec(&self) -> qlstm4::Result<ModelSpec> {
        let m = &self.model;
        let mut opts = m.options.clone();
        let transducer = m.preset == Preset::Rnnt;
        match &self.task {
            TaskSpec::Framewise(t) => {
                if transducer {
                    return Err(qlstm4::Error::InvalidArgument(
                        "the framewise task needs a framewise preset (hmm300 or hmm2000)".into(),
                    ));
                }
                // preset input sizes are scaled; pick the unscaled size that
                // lands on the task's feature dimension
                opts.input_dim
                    .get_or_insert((t.input_dim as f64 / m.scale).round() as usize);
                opts.output_dim.get_or_insert(t.classes);
            }
            TaskSpec::Grammar(g) => {
                if !transducer {
                    return Err(qlstm4::Error::InvalidArgument(
                        "the grammar task needs the rnnt preset".into(),
                    ));
                }
                opts.output_dim.get_or_insert(g.vocab);
            }
        }
        let spec = build_preset(m.preset, m.scale, &self.policy, &opts)?;
        let (want_in, want_out) = match &self.task {
            TaskSpec::Framewise(t) => (Some(t.input_dim), t.classes),
            TaskSpec::Grammar(g) => (None, g.vocab),
        };
        if want_in.is_some_and(|d| d != spec.input_dim) || spec.output_dim != want_out {
            return Err(qlstm4::Error::InvalidArgument(format!(
                "model dimensions {}→{} do not match the task",
                spec.input_dim, spec.output_dim
            )));
        }
        Ok(spec)
    }

    pub fn dataset(&self) -> qlstm4::Result<Dataset> {
        self.task.generate(self.data_seed())
    }
}
