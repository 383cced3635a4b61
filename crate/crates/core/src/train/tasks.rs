//! Seeded synthetic tasks for desk-scale experiments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Time-major frames with one label per frame and batch row.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBatch {
    pub xs: Vec<Tensor<f32>>,
    pub labels: Vec<Vec<usize>>,
}

/// Time-major token sequences; `targets[t]` is the symbol after `inputs[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    Frames(FrameBatch),
    Tokens(TokenBatch),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Batch>,
    pub holdout: Vec<Batch>,
}

/// Framewise classification of noisy class prototypes.
///
/// Labels follow a sticky Markov chain, so neighbouring frames carry
/// evidence. Feature gains span `gain_range` (log-uniform per dimension).
/// The last `nuisance_dims` dimensions carry only wide noise
/// (`nuisance_scale · N(0,1)`): a float model learns to ignore them, but they
/// stretch the first layer's dynamic range. A fraction `outlier_prob` of
/// entries may also be replaced by large outliers. With `groups > 0` class `c` sits at
/// `coarse[c % groups] + fine_scale · fine[c]`, so telling classes of one
/// group apart needs fine input resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FramewiseTask {
    pub input_dim: usize,
    pub classes: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub train_batches: usize,
    pub holdout_batches: usize,
    pub noise: f64,
    pub stay_prob: f64,
    pub gain_range: f64,
    pub outlier_prob: f64,
    pub outlier_scale: f64,
    pub groups: usize,
    pub fine_scale: f64,
    pub nuisance_dims: usize,
    pub nuisance_scale: f64,
}

impl Default for FramewiseTask {
    fn default() -> Self {
        Self {
            input_dim: 24,
            classes: 16,
            seq_len: 16,
            batch: 16,
            train_batches: 40,
            holdout_batches: 10,
            noise: 0.4,
            stay_prob: 0.85,
            gain_range: 4.0,
            outlier_prob: 0.0,
            outlier_scale: 40.0,
            groups: 4,
            fine_scale: 0.3,
            nuisance_dims: 4,
            nuisance_scale: 6.0,
        }
    }
}

/// Next-symbol prediction over a random second-order grammar.
///
/// Symbol 0 starts every sentence. Each context of two symbols allows
/// `branching` successors with geometrically decreasing probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarTask {
    pub vocab: usize,
    pub branching: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub train_batches: usize,
    pub holdout_batches: usize,
}

impl Default for GrammarTask {
    fn default() -> Self {
        Self {
            vocab: 46,
            branching: 3,
            seq_len: 20,
            batch: 16,
            train_batches: 30,
            holdout_batches: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Framewise(FramewiseTask),
    Grammar(GrammarTask),
}

impl TaskSpec {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        match self {
            TaskSpec::Framewise(t) => t.generate(seed),
            TaskSpec::Grammar(t) => t.generate(seed),
        }
    }
}

impl FramewiseTask {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.classes < 2
            || self.seq_len == 0
            || self.batch == 0
            || self.train_batches == 0
        {
            return Err(Error::invalid(
                "framewise task needs positive sizes and at least 2 classes",
            ));
        }
        if self.nuisance_dims >= self.input_dim || !(self.nuisance_scale >= 0.0) {
            return Err(Error::invalid(
                "framewise task needs nuisance_dims < input_dim and nuisance_scale >= 0",
            ));
        }
        if !(0.0..1.0).contains(&self.stay_prob)
            || !(0.0..1.0).contains(&self.outlier_prob)
            || self.gain_range < 1.0
        {
            return Err(Error::invalid(
                "framewise task probabilities must lie in [0, 1) and gain_range >= 1",
            ));
        }
        Ok(())
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let root = Rng::new(seed);
        let mut world = root.fork(1);
        let d = self.input_dim;
        let signal = d - self.nuisance_dims;
        let mut protos: Vec<f64> = (0..self.classes * d).map(|_| world.normal()).collect();
        if self.groups > 0 {
            let coarse: Vec<f64> = (0..self.groups * d).map(|_| world.normal()).collect();
            for c in 0..self.classes {
                let g = c % self.groups;
                for j in 0..d {
                    protos[c * d + j] = coarse[g * d + j] + self.fine_scale * protos[c * d + j];
                }
            }
        }
        let lg = self.gain_range.ln();
        let gains: Vec<f64> = (0..d)
            .map(|_| world.uniform(-lg / 2.0, lg / 2.0).exp())
            .collect();

        let make = |n: usize, rng: &mut Rng| -> Vec<Batch> {
            (0..n)
                .map(|_| {
                    let mut labels = vec![vec![0; self.batch]; self.seq_len];
                    let mut frames = vec![vec![0.0; self.batch * d]; self.seq_len];
                    for b in 0..self.batch {
                        let mut y = rng.below(self.classes);
                        for t in 0..self.seq_len {
                            if t > 0 && !rng.bernoulli(self.stay_prob) {
                                y = rng.below(self.classes);
                            }
                            labels[t][b] = y;
                            for j in 0..d {
                                let mut v = if j >= signal {
                                    self.nuisance_scale * rng.normal()
                                } else {
                                    gains[j] * (protos[y * d + j] + self.noise * rng.normal())
                                };
                                if rng.bernoulli(self.outlier_prob) {
                                    v = self.outlier_scale * rng.uniform(-1.0, 1.0);
                                }
                                frames[t][b * d + j] = v;
                            }
                        }
                    }
                    let xs = frames
                        .iter()
                        .map(|f| Tensor::from_f64(&[self.batch, d], f))
                        .collect::<Result<_>>()
                        .expect("finite features");
                    Batch::Frames(FrameBatch { xs, labels })
                })
                .collect()
        };
        Ok(Dataset {
            train: make(self.train_batches, &mut root.fork(2)),
            holdout: make(self.holdout_batches, &mut root.fork(3)),
        })
    }
}

impl GrammarTask {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 3
            || self.branching == 0
            || self.branching >= self.vocab
            || self.seq_len == 0
            || self.batch == 0
        {
            return Err(Error::invalid(
                "grammar task needs vocab >= 3 and 0 < branching < vocab",
            ));
        }
        if self.train_batches == 0 {
            return Err(Error::invalid(
                "grammar task needs at least one training batch",
            ));
        }
        Ok(())
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let root = Rng::new(seed);
        let mut world = root.fork(1);
        let v = self.vocab;
        // successors[a*v + b] = symbols allowed after (a, b); never 0
        let successors: Vec<Vec<usize>> = (0..v * v)
            .map(|_| {
                let mut s: Vec<usize> = (1..v).collect();
                world.shuffle(&mut s);
                s.truncate(self.branching);
                s
            })
            .collect();
        let weights: Vec<f64> = (0..self.branching).map(|i| 0.5f64.powi(i as i32)).collect();
        let wsum: f64 = weights.iter().sum();

        let make = |n: usize, rng: &mut Rng| -> Vec<Batch> {
            (0..n)
                .map(|_| {
                    let mut seqs = vec![vec![0usize; self.seq_len + 1]; self.batch];
                    for s in &mut seqs {
                        for t in 1..=self.seq_len {
                            let prev2 = if t >= 2 { s[t - 2] } else { 0 };
                            let succ = &successors[prev2 * v + s[t - 1]];
                            let mut u = rng.next_f64() * wsum;
                            let mut pick = succ[succ.len() - 1];
                            for (i, w) in weights.iter().enumerate() {
                                if u < *w {
                                    pick = succ[i];
                                    break;
                                }
                                u -= w;
                            }
                            s[t] = pick;
                        }
                    }
                    let col = |t: usize| seqs.iter().map(|s| s[t]).collect::<Vec<_>>();
                    Batch::Tokens(TokenBatch {
                        inputs: (0..self.seq_len).map(col).collect(),
                        targets: (1..=self.seq_len).map(col).collect(),
                    })
                })
                .collect()
        };
        Ok(Dataset {
            train: make(self.train_batches, &mut root.fork(2)),
            holdout: make(self.holdout_batches, &mut root.fork(3)),
        })
    }
}
