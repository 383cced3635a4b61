use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::checkpoint::{Checkpoint, RngState};
use super::tasks::{Batch, Dataset};
use super::{LrSchedule, Optimizer};
use crate::error::{Error, Result};
use crate::models::{Binding, Network};
use crate::numerics::{Real, Rng, Tape, Var};
use crate::qlstm::{Ctx, ProbeStats};

pub const METRICS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Seed of the dropout and shuffling streams.
    pub seed: u64,
    /// Epoch number of the first epoch run (for resumed runs).
    pub start_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate at the start of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub holdout_loss: f64,
    pub accuracy: f64,
    /// Upper clip bound of every fixed or learned activation quantizer at
    /// the end of the epoch.
    pub bounds: BTreeMap<String, f64>,
    /// Clip counters accumulated over the epoch's training batches.
    pub clips: BTreeMap<String, ProbeStats>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network<f32>,
    pub optimizer: Optimizer<f32>,
    pub metrics: Vec<EpochMetrics>,
    /// Epoch at which a non-finite loss or update stopped the run. The
    /// network and optimizer are then the last good (end of previous
    /// epoch) state.
    pub diverged: Option<usize>,
    pub rng: Rng,
    pub epochs_done: usize,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec_hash: self.network.spec.spec_hash(),
            epoch: self.epochs_done as u64,
            rng: RngState::of(&self.rng),
            params: self.network.params.clone(),
            optimizer: self.optimizer.state.clone(),
            packed: BTreeMap::new(),
        }
    }
}

/// Mean loss (over time steps) and correct/total counts for one batch.
pub fn batch_loss<T: Real>(
    net: &Network<T>,
    ctx: &mut Ctx<'_, T>,
    b: &Binding,
    batch: &Batch,
) -> Result<(Var, usize, usize)> {
    let tape = ctx.tape;
    let (logits, targets): (Vec<Var>, &Vec<Vec<usize>>) = match batch {
        Batch::Frames(f) => {
            let xs: Vec<Var> = f.xs.iter().map(|x| tape.constant(x.cast())).collect();
            (net.framewise(ctx, b, &xs)?, &f.labels)
        }
        Batch::Tokens(t) => (net.lm_logits(ctx, b, &t.inputs)?, &t.targets),
    };
    let mut total = None;
    let (mut correct, mut count) = (0, 0);
    for (z, y) in logits.iter().zip(targets) {
        let ce = tape.cross_entropy(*z, y)?;
        total = Some(match total {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
        let v = tape.value(*z);
        let n = v.cols();
        for (row, &label) in y.iter().enumerate() {
            let r = &v.data()[row * n..(row + 1) * n];
            let arg = (0..n).fold(0, |best, j| if r[j] > r[best] { j } else { best });
            correct += (arg == label) as usize;
        }
        count += y.len();
    }
    let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
    let loss = tape.scale(total, T::of(1.0 / logits.len() as f64))?;
    Ok((loss, correct, count))
}

/// Mean loss and accuracy in evaluation mode (no dropout).
pub fn evaluate<T: Real>(net: &Network<T>, batches: &[Batch]) -> Result<(f64, f64)> {
    let (mut loss, mut correct, mut count) = (0.0, 0, 0);
    for batch in batches {
        let tape = Tape::new();
        let b = net.bind(&tape, false);
        let mut ctx = Ctx::new(&tape, Rng::new(0), false);
        let (l, c, n) = batch_loss(net, &mut ctx, &b, batch)?;
        loss += tape.value(l).item().as_f64();
        correct += c;
        count += n;
    }
    let nb = batches.len().max(1) as f64;
    Ok((loss / nb, correct as f64 / count.max(1) as f64))
}

/// Current upper bound of every fixed or learned activation quantizer.
pub fn current_bounds<T: Real>(net: &Network<T>) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let spec = &net.spec;
    let mut sites = Vec::new();
    for (name, l) in spec.lstm_layers() {
        sites.push((format!("{name}.input"), l.input_q));
        sites.push((format!("{name}.hidden"), l.hidden_q));
    }
    for (name, f) in spec.fc_layers() {
        sites.push((format!("{name}.input"), f.act_q));
    }
    for (site, q) in sites {
        if q.is_learnable() {
            if let Some(t) = net.params.get(&format!("{site}.pos")) {
                out.insert(site, t.item().as_f64());
            }
        } else if let Some(b) = q.bounds {
            out.insert(site, b.alpha_pos);
        }
    }
    out
}

fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

/// Quantization-aware training.
///
/// Deterministic given the dataset, `cfg.seed` and the initial network:
/// batch order is shuffled per epoch from one stream, dropout masks come
/// from another.
pub fn train_qat(
    net: Network<f32>,
    data: &Dataset,
    mut opt: Optimizer<f32>,
    sched: &LrSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    sched.validate()?;
    let root = Rng::new(cfg.seed);
    let mut shuffle = root.fork(2);
    let mut rng = root.fork(1);
    let mut net = net;
    let mut metrics = Vec::new();
    let mut diverged = None;
    let mut done = 0;

    for k in 0..cfg.epochs {
        let epoch = cfg.start_epoch + k;
        let snapshot = (net.params.clone(), opt.state.clone(), rng.clone());
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        shuffle.shuffle(&mut order);

        let n = order.len();
        let mut train_loss = 0.0;
        let mut clips: BTreeMap<String, ProbeStats> = BTreeMap::new();
        let mut failed = false;
        for (i, &bi) in order.iter().enumerate() {
            let lr = sched.lr_at(epoch, i as f64 / n as f64);
            let tape = Tape::new();
            let b = net.bind(&tape, true);
            let mut ctx = Ctx::new(&tape, rng.clone(), true);
            let step = batch_loss(&net, &mut ctx, &b, &data.train[bi]).and_then(|(loss, _, _)| {
                let value = tape.value(loss).item() as f64;
                let mut g = tape.backward(loss)?;
                let grads = b
                    .vars
                    .iter()
                    .filter_map(|(name, v)| g.take(*v).map(|t| (name.clone(), t)))
                    .collect();
                Ok((value, grads))
            });
            rng = ctx.rng;
            for (site, p) in ctx.probes {
                let c = clips.entry(site).or_default();
                c.calls += p.calls;
                c.clipped += p.clipped;
                c.total += p.total;
                c.max_abs_out = c.max_abs_out.max(p.max_abs_out);
                c.last_bounds = p.last_bounds;
            }
            let (value, grads) = match step {
                Ok(v) => v,
                Err(e) if is_numerical(&e) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            opt.step(&mut net.params, &grads, lr)?;
            if !value.is_finite() || !net.params.values().all(|t| t.all_finite()) {
                failed = true;
                break;
            }
            train_loss += value;
        }
        let eval = if failed {
            None
        } else {
            Some(evaluate(&net, &data.holdout))
        };
        let (holdout_loss, accuracy) = match eval {
            Some(Ok(v)) if v.0.is_finite() => v,
            Some(Err(e)) if !is_numerical(&e) => return Err(e),
            _ => {
                (net.params, opt.state, rng) = snapshot;
                diverged = Some(epoch);
                break;
            }
        };
        metrics.push(EpochMetrics {
            epoch,
            lr: sched.lr_at(epoch, 0.0),
            train_loss: train_loss / n as f64,
            holdout_loss,
            accuracy,
            bounds: current_bounds(&net),
            clips,
        });
        done = epoch + 1;
    }
    Ok(TrainOutcome {
        network: net,
        optimizer: opt,
        metrics,
        diverged,
        rng,
        epochs_done: done.max(cfg.start_epoch),
    })
}

/// Metrics as CSV (format version [`METRICS_VERSION`]): a `#` comment line
/// with the version, a header, then one row per epoch. Columns are
/// `epoch,lr,train_loss,holdout_loss,accuracy` followed by one
/// `bound:<site>` column per quantizer site in name order.
pub fn metrics_csv(metrics: &[EpochMetrics], sites: &[String]) -> String {
    let mut s =
        format!("# qlstm4 metrics v{METRICS_VERSION}\nepoch,lr,train_loss,holdout_loss,accuracy");
    for site in sites {
        write!(s, ",bound:{site}").unwrap();
    }
    s.push('\n');
    for m in metrics {
        write!(
            s,
            "{},{},{},{},{}",
            m.epoch, m.lr, m.train_loss, m.holdout_loss, m.accuracy
        )
        .unwrap();
        for site in sites {
            match m.bounds.get(site) {
                Some(v) => write!(s, ",{v}").unwrap(),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}
