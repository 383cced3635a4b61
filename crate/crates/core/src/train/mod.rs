//! Optimizers, learning-rate schedules, checkpoints, toy tasks and the
//! quantization-aware training loop.

pub mod checkpoint;
pub mod experiments;
mod optim;
mod qat;
mod schedule;
pub mod tasks;

pub use checkpoint::{write_atomic, Checkpoint, PackedEntry, RngState};
pub use optim::{Optimizer, OptimizerKind, OptimizerSpec, OptimizerState};
pub use qat::{
    batch_loss, current_bounds, evaluate, metrics_csv, train_qat, EpochMetrics, TrainConfig,
    TrainOutcome, METRICS_VERSION,
};
pub use schedule::{DecayLaw, HalfDecayMode, LrSchedule};
pub use tasks::{Batch, Dataset, FramewiseTask, GrammarTask, TaskSpec};
