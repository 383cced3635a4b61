use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HalfDecayMode {
    /// `lr0 → lr0/2` linearly over the run.
    Linear,
    /// `lr0 · 0.5^epoch`.
    PerEpochHalving,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayLaw {
    Linear,
    Geometric,
}

/// Learning-rate schedules. `lr_at(epoch, frac)` evaluates at the fractional
/// position `epoch + frac`; step-style schedules ignore `frac`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        lr0: f64,
    },
    /// `lr0 · factor^(epoch - start_epoch + 1)` from `start_epoch` on.
    StepAnneal {
        lr0: f64,
        #[serde(default = "inv_sqrt2")]
        factor: f64,
        #[serde(default = "ten")]
        start_epoch: usize,
    },
    /// Linear ramp from `lr0` to `lr0 · scale` over `warmup_epochs`, then
    /// held.
    WarmupScaled {
        lr0: f64,
        scale: f64,
        #[serde(default = "ten")]
        warmup_epochs: usize,
    },
    /// Triangular one-cycle: `peak/div → peak` over the first `pct_start`
    /// of the run, then down to `peak/final_div`.
    OneCycleTriangular {
        peak: f64,
        total_epochs: usize,
        #[serde(default = "pct_start")]
        pct_start: f64,
        #[serde(default = "div")]
        div: f64,
        #[serde(default = "final_div")]
        final_div: f64,
    },
    LinearDecayHalf {
        lr0: f64,
        total_epochs: usize,
        #[serde(default = "linear_mode")]
        mode: HalfDecayMode,
    },
    /// `lr0 → lr_min` over `decay_epochs`, then held at `lr_min`.
    CustomDecreasing {
        #[serde(default = "custom_lr0")]
        lr0: f64,
        #[serde(default = "custom_lr_min")]
        lr_min: f64,
        #[serde(default = "eight")]
        decay_epochs: usize,
        #[serde(default = "linear_law")]
        law: DecayLaw,
    },
}

fn inv_sqrt2() -> f64 {
    std::f64::consts::FRAC_1_SQRT_2
}
fn ten() -> usize {
    10
}
fn eight() -> usize {
    8
}
fn pct_start() -> f64 {
    0.3
}
fn div() -> f64 {
    25.0
}
fn final_div() -> f64 {
    1e4
}
fn linear_mode() -> HalfDecayMode {
    HalfDecayMode::Linear
}
fn custom_lr0() -> f64 {
    4e-4
}
fn custom_lr_min() -> f64 {
    1e-5
}
fn linear_law() -> DecayLaw {
    DecayLaw::Linear
}

impl LrSchedule {
    /// `custom_decreasing` with its default constants.
    pub fn custom_decreasing() -> Self {
        LrSchedule::CustomDecreasing {
            lr0: custom_lr0(),
            lr_min: custom_lr_min(),
            decay_epochs: eight(),
            law: DecayLaw::Linear,
        }
    }

    pub fn step_anneal(lr0: f64) -> Self {
        LrSchedule::StepAnneal {
            lr0,
            factor: inv_sqrt2(),
            start_epoch: ten(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |n: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "schedule {n} must be positive, got {v}"
                )))
            }
        };
        match *self {
            LrSchedule::Constant { lr0 } => pos("lr0", lr0),
            LrSchedule::StepAnneal { lr0, factor, .. } => {
                pos("lr0", lr0)?;
                pos("factor", factor)
            }
            LrSchedule::WarmupScaled { lr0, scale, .. } => {
                pos("lr0", lr0)?;
                pos("scale", scale)
            }
            LrSchedule::OneCycleTriangular {
                peak,
                total_epochs,
                pct_start,
                div,
                final_div,
            } => {
                pos("peak", peak)?;
                pos("div", div)?;
                pos("final_div", final_div)?;
                if total_epochs == 0 || !(pct_start > 0.0 && pct_start < 1.0) {
                    return Err(Error::invalid(
                        "one_cycle needs total_epochs > 0 and pct_start in (0, 1)",
                    ));
                }
                Ok(())
            }
            LrSchedule::LinearDecayHalf {
                lr0, total_epochs, ..
            } => {
                pos("lr0", lr0)?;
                if total_epochs == 0 {
                    return Err(Error::invalid("linear_decay_half needs total_epochs > 0"));
                }
                Ok(())
            }
            LrSchedule::CustomDecreasing {
                lr0,
                lr_min,
                decay_epochs,
                ..
            } => {
                pos("lr0", lr0)?;
                pos("lr_min", lr_min)?;
                if lr_min > lr0 || decay_epochs == 0 {
                    return Err(Error::invalid(
                        "custom_decreasing needs lr_min <= lr0 and decay_epochs > 0",
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn lr_at(&self, epoch: usize, frac: f64) -> f64 {
        let t = epoch as f64 + frac.clamp(0.0, 1.0);
        match *self {
            LrSchedule::Constant { lr0 } => lr0,
            LrSchedule::StepAnneal {
                lr0,
                factor,
                start_epoch,
            } => {
                if epoch < start_epoch {
                    lr0
                } else {
                    lr0 * factor.powi((epoch - start_epoch + 1) as i32)
                }
            }
            LrSchedule::WarmupScaled {
                lr0,
                scale,
                warmup_epochs,
            } => {
                let w = (t / warmup_epochs.max(1) as f64).min(1.0);
                lr0 * (1.0 + (scale - 1.0) * w)
            }
            LrSchedule::OneCycleTriangular {
                peak,
                total_epochs,
                pct_start,
                div,
                final_div,
            } => {
                let u = (t / total_epochs as f64).min(1.0);
                let start = peak / div;
                if u <= pct_start {
                    start + (peak - start) * u / pct_start
                } else {
                    let end = peak / final_div;
                    peak + (end - peak) * (u - pct_start) / (1.0 - pct_start)
                }
            }
            LrSchedule::LinearDecayHalf {
                lr0,
                total_epochs,
                mode,
            } => match mode {
                HalfDecayMode::Linear => lr0 * (1.0 - 0.5 * (t / total_epochs as f64).min(1.0)),
                HalfDecayMode::PerEpochHalving => lr0 * 0.5f64.powi(epoch.min(total_epochs) as i32),
            },
            LrSchedule::CustomDecreasing {
                lr0,
                lr_min,
                decay_epochs,
                law,
            } => {
                let u = (t / decay_epochs as f64).min(1.0);
                match law {
                    DecayLaw::Linear => lr0 + (lr_min - lr0) * u,
                    DecayLaw::Geometric => lr0 * (lr_min / lr0).powf(u),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(s: &LrSchedule, epochs: usize) -> Vec<f64> {
        (0..epochs)
            .flat_map(|e| (0..4).map(move |q| (e, q as f64 / 4.0)))
            .map(|(e, f)| s.lr_at(e, f))
            .collect()
    }

    #[test]
    fn step_anneal_examples() {
        let s = LrSchedule::step_anneal(0.1);
        assert_eq!(s.lr_at(9, 0.5), 0.1);
        assert!((s.lr_at(10, 0.0) - 0.0707).abs() < 1e-4);
        assert!((s.lr_at(11, 0.0) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn custom_decreasing_examples() {
        let s = LrSchedule::custom_decreasing();
        assert_eq!(s.lr_at(0, 0.0), 4e-4);
        for e in 8..30 {
            assert!((s.lr_at(e, 0.3) - 1e-5).abs() < 1e-18);
        }
        let g = LrSchedule::CustomDecreasing {
            lr0: 4e-4,
            lr_min: 1e-5,
            decay_epochs: 8,
            law: DecayLaw::Geometric,
        };
        assert!((g.lr_at(4, 0.0) - (4e-4f64 * 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_is_constant() {
        let s = LrSchedule::Constant { lr0: 0.3 };
        assert!(curve(&s, 50).iter().all(|&v| v == 0.3));
    }

    #[test]
    fn decreasing_schedules_never_increase() {
        for s in [
            LrSchedule::custom_decreasing(),
            LrSchedule::LinearDecayHalf {
                lr0: 0.01,
                total_epochs: 10,
                mode: HalfDecayMode::Linear,
            },
            LrSchedule::LinearDecayHalf {
                lr0: 0.01,
                total_epochs: 10,
                mode: HalfDecayMode::PerEpochHalving,
            },
        ] {
            let c = curve(&s, 20);
            assert!(c.windows(2).all(|w| w[1] <= w[0]), "{s:?}");
            assert!(c.iter().all(|&v| v > 0.0));
        }
        let half = LrSchedule::LinearDecayHalf {
            lr0: 0.01,
            total_epochs: 10,
            mode: HalfDecayMode::Linear,
        };
        assert!((half.lr_at(10, 0.0) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn one_cycle_is_unimodal() {
        let s = LrSchedule::OneCycleTriangular {
            peak: 1e-3,
            total_epochs: 20,
            pct_start: 0.3,
            div: 25.0,
            final_div: 1e4,
        };
        let c = curve(&s, 20);
        let top = c.iter().cloned().fold(0.0, f64::max);
        let k = c.iter().position(|&v| v == top).unwrap();
        assert!(c[..=k].windows(2).all(|w| w[1] >= w[0]));
        assert!(c[k..].windows(2).all(|w| w[1] <= w[0]));
        assert!(c.iter().all(|&v| v > 0.0));
        assert!((top - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn warmup_ramps_then_holds() {
        let s = LrSchedule::WarmupScaled {
            lr0: 0.1,
            scale: 8.0,
            warmup_epochs: 10,
        };
        assert_eq!(s.lr_at(0, 0.0), 0.1);
        assert!((s.lr_at(5, 0.0) - 0.45).abs() < 1e-12);
        assert_eq!(s.lr_at(12, 0.0), 0.8);
    }

    #[test]
    fn validation() {
        assert!(LrSchedule::Constant { lr0: 0.0 }.validate().is_err());
        assert!(LrSchedule::CustomDecreasing {
            lr0: 1e-5,
            lr_min: 1e-3,
            decay_epochs: 8,
            law: DecayLaw::Linear
        }
        .validate()
        .is_err());
        assert!(LrSchedule::custom_decreasing().validate().is_ok());
    }
}
