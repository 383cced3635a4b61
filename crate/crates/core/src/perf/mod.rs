//! Analytical runtime model of transducer inference on a host CPU with an
//! attached matrix co-processor.
//!
//! Every LSTM and encoder-side layer runs on the co-processor at
//! `peak(precision) · efficiency(precision, size)` multiply-accumulates per
//! second plus a fixed cost per call. The joint network and beam
//! bookkeeping run on the host at a single rate, whatever the precision
//! policy. Full-precision layers are modelled as FP16 on the device.
//!
//! Efficiencies come from a two-bucket table per precision: layers with at
//! least `large_layer_weights` weights use `large`, the rest `small`. The
//! shipped profile ([`DeviceProfile::default_profile`]) was produced by
//! [`calibrate`]: with FP16 fixed, the INT4 `large` and `small` factors and
//! the host rate are bisected until the full-size RNN-T reaches the target
//! encoder, prediction and end-to-end speedups.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    build_preset, Component, ModelSpec, Precision, Preset, PresetOptions, QuantPolicy,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DevicePrecision {
    Fp16,
    Int8,
    Int4,
}

impl DevicePrecision {
    /// Device precision a layer of storage precision `p` runs at.
    pub fn of(p: Precision) -> Self {
        match p {
            Precision::Full => DevicePrecision::Fp16,
            Precision::Int(b) if b <= 4 => DevicePrecision::Int4,
            Precision::Int(_) => DevicePrecision::Int8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerPrecision<T> {
    pub fp16: T,
    pub int8: T,
    pub int4: T,
}

impl<T: Copy> PerPrecision<T> {
    pub fn get(&self, p: DevicePrecision) -> T {
        match p {
            DevicePrecision::Fp16 => self.fp16,
            DevicePrecision::Int8 => self.int8,
            DevicePrecision::Int4 => self.int4,
        }
    }
}

/// Utilization for small and large layers, each in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Efficiency {
    pub small: f64,
    pub large: f64,
}

impl Efficiency {
    fn get(&self, large: bool) -> f64 {
        if large {
            self.large
        } else {
            self.small
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub name: String,
    /// Peak co-processor multiply-accumulates per second.
    pub peak_macs_per_s: PerPrecision<f64>,
    pub efficiency: PerPrecision<Efficiency>,
    /// Weight count from which a layer counts as large.
    pub large_layer_weights: u64,
    /// Fixed cost of one co-processor call (seconds).
    pub call_overhead_s: f64,
    /// Host multiply-accumulates per second for the joint network.
    pub host_macs_per_s: f64,
    /// Fixed host cost per joint evaluation (seconds).
    pub host_call_overhead_s: f64,
}

const DEFAULT_PROFILE: &str = include_str!("../../data/default_device.toml");

impl DeviceProfile {
    /// The shipped calibrated profile.
    pub fn default_profile() -> Self {
        Self::from_toml(DEFAULT_PROFILE).expect("shipped device profile is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Self =
            toml::from_str(text).map_err(|e| Error::invalid(format!("device profile: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("profile serializes")
    }

    /// Effective throughput of a layer.
    pub fn rate(&self, p: DevicePrecision, large: bool) -> f64 {
        self.peak_macs_per_s.get(p) * self.efficiency.get(p).get(large)
    }

    /// Peak throughputs are ordered INT4 ≥ INT8 ≥ FP16, efficiencies lie in
    /// (0, 1] and never rise as precision drops, and effective throughput
    /// never falls as precision drops. Together these make quantizing a
    /// layer never slower, and never faster than the peak ratio.
    pub fn validate(&self) -> Result<()> {
        let pos = |n: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "device profile: {n} must be positive, got {v}"
                )))
            }
        };
        let nonneg = |n: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "device profile: {n} must be non-negative, got {v}"
                )))
            }
        };
        use DevicePrecision::*;
        for p in [Fp16, Int8, Int4] {
            pos("peak throughput", self.peak_macs_per_s.get(p))?;
            let e = self.efficiency.get(p);
            for v in [e.small, e.large] {
                if !(v > 0.0 && v <= 1.0) {
                    return Err(Error::invalid(format!(
                        "device profile: {p:?} efficiency {v} not in (0, 1]"
                    )));
                }
            }
        }
        let peak = &self.peak_macs_per_s;
        if !(peak.int4 >= peak.int8 && peak.int8 >= peak.fp16) {
            return Err(Error::invalid(
                "device profile: peak throughput must satisfy int4 >= int8 >= fp16",
            ));
        }
        for large in [false, true] {
            let e = |p| self.efficiency.get(p).get(large);
            if !(e(Int4) <= e(Int8) && e(Int8) <= e(Fp16)) {
                return Err(Error::invalid(
                    "device profile: efficiency must not rise as precision drops",
                ));
            }
            if !(self.rate(Int4, large) >= self.rate(Int8, large)
                && self.rate(Int8, large) >= self.rate(Fp16, large))
            {
                return Err(Error::invalid(
                    "device profile: effective throughput must satisfy int4 >= int8 >= fp16",
                ));
            }
        }
        pos("host rate", self.host_macs_per_s)?;
        nonneg("call overhead", self.call_overhead_s)?;
        nonneg("host call overhead", self.host_call_overhead_s)?;
        Ok(())
    }
}

/// One decoding workload.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadSpec {
    pub spec: ModelSpec,
    /// Encoder frames `T`.
    pub frames: usize,
    /// Beam width `B`.
    pub beam: usize,
    /// Prediction-network steps per frame for each hypothesis; the
    /// prediction network runs `beam · round(frames · expansions_per_frame)`
    /// times.
    pub expansions_per_frame: f64,
}

pub const DEFAULT_FRAMES: usize = 152;

impl WorkloadSpec {
    pub fn new(spec: ModelSpec, beam: usize) -> Self {
        Self {
            spec,
            frames: DEFAULT_FRAMES,
            beam,
            expansions_per_frame: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.beam == 0 {
            return Err(Error::invalid("workload needs frames >= 1 and beam >= 1"));
        }
        if !(self.expansions_per_frame.is_finite() && self.expansions_per_frame > 0.0) {
            return Err(Error::invalid("expansions_per_frame must be positive"));
        }
        Ok(())
    }

    /// Prediction-network steps of one hypothesis.
    pub fn steps(&self) -> usize {
        ((self.frames as f64 * self.expansions_per_frame).round() as usize).max(1)
    }
}

/// Work of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOps {
    pub name: String,
    pub component: Component,
    pub macs: u64,
    pub weights: u64,
    pub precision: DevicePrecision,
    /// Kernel invocations (co-processor calls, or joint evaluations on the
    /// host).
    pub calls: u64,
}

/// Per-layer multiply-accumulate counts of a workload.
pub fn op_counts(w: &WorkloadSpec) -> Result<Vec<LayerOps>> {
    w.validate()?;
    let steps = w.steps();
    let pred_calls = steps * w.beam;
    let macs = w.spec.macs(w.frames, pred_calls);
    let weights = |name: &str| -> u64 {
        let prefix = format!("{name}.");
        w.spec
            .tensors()
            .iter()
            .filter(|t| {
                t.name.starts_with(&prefix) && (t.name.ends_with(".W") || t.name.ends_with(".R"))
            })
            .map(|t| t.len() as u64)
            .sum()
    };
    Ok(macs
        .layers
        .into_iter()
        .map(|l| {
            let calls = match l.component {
                Component::Encoder | Component::Head => w.frames,
                Component::Prediction => steps,
                Component::Joint => pred_calls,
            } as u64;
            LayerOps {
                weights: weights(&l.name),
                precision: DevicePrecision::of(l.precision),
                name: l.name,
                component: l.component,
                macs: l.macs,
                calls,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTime {
    pub name: String,
    pub component: Component,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeBreakdown {
    pub encoder_time: f64,
    pub prediction_time: f64,
    pub joint_time: f64,
    /// Framewise output layers (zero for transducers).
    pub head_time: f64,
    pub total: f64,
    pub layers: Vec<LayerTime>,
}

impl RuntimeBreakdown {
    pub fn component(&self, c: Component) -> f64 {
        match c {
            Component::Encoder => self.encoder_time,
            Component::Prediction => self.prediction_time,
            Component::Joint => self.joint_time,
            Component::Head => self.head_time,
        }
    }
}

/// Runtime of explicit per-layer work.
pub fn estimate_ops(ops: &[LayerOps], device: &DeviceProfile) -> RuntimeBreakdown {
    let mut layers = Vec::with_capacity(ops.len());
    let (mut enc, mut pred, mut joint, mut head) = (0.0, 0.0, 0.0, 0.0);
    for l in ops {
        let seconds = if l.component == Component::Joint {
            l.macs as f64 / device.host_macs_per_s + l.calls as f64 * device.host_call_overhead_s
        } else {
            let large = l.weights >= device.large_layer_weights;
            l.macs as f64 / device.rate(l.precision, large)
                + l.calls as f64 * device.call_overhead_s
        };
        match l.component {
            Component::Encoder => enc += seconds,
            Component::Prediction => pred += seconds,
            Component::Joint => joint += seconds,
            Component::Head => head += seconds,
        }
        layers.push(LayerTime {
            name: l.name.clone(),
            component: l.component,
            seconds,
        });
    }
    RuntimeBreakdown {
        encoder_time: enc,
        prediction_time: pred,
        joint_time: joint,
        head_time: head,
        total: enc + pred + joint + head,
        layers,
    }
}

pub fn estimate(w: &WorkloadSpec, device: &DeviceProfile) -> Result<RuntimeBreakdown> {
    device.validate()?;
    Ok(estimate_ops(&op_counts(w)?, device))
}

/// Speedups of a quantized model over its full-precision twin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub beam: usize,
    pub encoder: f64,
    pub prediction: f64,
    pub joint: f64,
    pub end_to_end: f64,
}

pub fn speedup(base: &RuntimeBreakdown, quant: &RuntimeBreakdown, beam: usize) -> Speedup {
    Speedup {
        beam,
        encoder: base.encoder_time / quant.encoder_time,
        prediction: base.prediction_time / quant.prediction_time,
        joint: base.joint_time / quant.joint_time,
        end_to_end: base.total / quant.total,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub beam: usize,
    pub frames: usize,
    pub breakdown: RuntimeBreakdown,
}

pub fn sweep(
    workloads: &[(String, WorkloadSpec)],
    device: &DeviceProfile,
) -> Result<Vec<SweepRow>> {
    workloads
        .iter()
        .map(|(label, w)| {
            Ok(SweepRow {
                label: label.clone(),
                beam: w.beam,
                frames: w.frames,
                breakdown: estimate(w, device)?,
            })
        })
        .collect()
}

/// Stacked-bar table: one row per workload with component times in
/// milliseconds.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("label,beam,frames,encoder_ms,prediction_ms,joint_ms,total_ms\n");
    for r in rows {
        let b = &r.breakdown;
        let ms = |v: f64| v * 1e3;
        writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.label,
            r.beam,
            r.frames,
            ms(b.encoder_time),
            ms(b.prediction_time + b.head_time),
            ms(b.joint_time),
            ms(b.total)
        )
        .unwrap();
    }
    s
}

/// Full-size RNN-T in FP16 and under the INT4 BAC policy.
pub fn rnnt_pair() -> Result<(ModelSpec, ModelSpec)> {
    let opts = PresetOptions::default();
    Ok((
        build_preset(Preset::Rnnt, 1.0, &QuantPolicy::fp32(), &opts)?,
        build_preset(Preset::Rnnt, 1.0, &QuantPolicy::int4_bac(true), &opts)?,
    ))
}

/// FP16-vs-INT4 speedups of the full-size RNN-T for each beam width.
pub fn rnnt_speedups(device: &DeviceProfile, beams: &[usize]) -> Result<Vec<Speedup>> {
    let (fp, q) = rnnt_pair()?;
    beams
        .iter()
        .map(|&b| {
            let base = estimate(&WorkloadSpec::new(fp.clone(), b), device)?;
            let quant = estimate(&WorkloadSpec::new(q.clone(), b), device)?;
            Ok(speedup(&base, &quant, b))
        })
        .collect()
}

/// Stacked-bar sweep rows (`fp16`/`int4` per beam) of the full-size RNN-T.
pub fn rnnt_sweep(device: &DeviceProfile, beams: &[usize]) -> Result<Vec<SweepRow>> {
    let (fp, q) = rnnt_pair()?;
    let mut w = Vec::new();
    for &b in beams {
        w.push(("fp16".to_string(), WorkloadSpec::new(fp.clone(), b)));
        w.push(("int4".to_string(), WorkloadSpec::new(q.clone(), b)));
    }
    sweep(&w, device)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTargets {
    pub encoder: f64,
    pub prediction: f64,
    pub end_to_end: f64,
    pub beams: Vec<usize>,
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        Self {
            encoder: 2.6,
            prediction: 3.3,
            end_to_end: 2.6,
            beams: vec![4, 8, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub profile: DeviceProfile,
    pub speedups: Vec<Speedup>,
    /// Mean relative residual per target (achieved / target − 1).
    pub residuals: [f64; 3],
}

/// Bisect `f(x) = target` for increasing `f` on `[lo, hi]`.
fn bisect(
    mut lo: f64,
    mut hi: f64,
    target: f64,
    log: bool,
    f: impl Fn(f64) -> Result<f64>,
) -> Result<f64> {
    let (flo, fhi) = (f(lo)?, f(hi)?);
    if !(flo <= target && target <= fhi) {
        return Err(Error::invalid(format!(
            "calibration target {target} outside reachable range [{flo:.4}, {fhi:.4}]"
        )));
    }
    for _ in 0..200 {
        let mid = if log {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
        if f(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Fit the INT4 efficiencies (large layers to the encoder target, small
/// layers to the prediction target) and then the host rate (to the
/// end-to-end target), each averaged over `targets.beams`. The fit runs in
/// that order because the encoder and prediction speedups do not depend on
/// the host rate. INT8 efficiencies are clamped into the admissible range.
pub fn calibrate(base: &DeviceProfile, targets: &CalibrationTargets) -> Result<Calibration> {
    if targets.beams.is_empty() {
        return Err(Error::invalid("calibration needs at least one beam width"));
    }
    base.validate()?;
    let avg = |p: &DeviceProfile, pick: fn(&Speedup) -> f64| -> Result<f64> {
        Ok(mean(rnnt_speedups(p, &targets.beams)?.iter().map(pick)))
    };
    let fp = base.efficiency.fp16;
    let mut p = base.clone();
    let with_int4 = |p: &DeviceProfile, small: f64, large: f64| {
        let mut q = p.clone();
        q.efficiency.int4 = Efficiency { small, large };
        // keep INT8 between the FP16 and INT4 efficiencies and rates
        let r = q.peak_macs_per_s.int4 / q.peak_macs_per_s.int8;
        let clamp = |e8: f64, e4: f64, e16: f64| e8.max(e4).min(e16).min(r * e4);
        q.efficiency.int8 = Efficiency {
            small: clamp(q.efficiency.int8.small, small, fp.small),
            large: clamp(q.efficiency.int8.large, large, fp.large),
        };
        q
    };
    // lower efficiency bound keeps INT4 at least as fast as FP16
    let ratio = base.peak_macs_per_s.fp16 / base.peak_macs_per_s.int4;
    let large = bisect(ratio * fp.large, fp.large, targets.encoder, false, |e| {
        avg(
            &with_int4(&p, p.efficiency.int4.small.max(ratio * fp.small), e),
            |s| s.encoder,
        )
    })?;
    let small = bisect(ratio * fp.small, fp.small, targets.prediction, false, |e| {
        avg(&with_int4(&p, e, large), |s| s.prediction)
    })?;
    p = with_int4(&p, small, large);
    // a slower host dilutes the device speedup
    let host = bisect(1e6, 1e16, targets.end_to_end, true, |h| {
        let mut q = p.clone();
        q.host_macs_per_s = h;
        avg(&q, |s| s.end_to_end)
    })?;
    p.host_macs_per_s = host;
    p.validate()?;
    let speedups = rnnt_speedups(&p, &targets.beams)?;
    let res = |pick: fn(&Speedup) -> f64, t: f64| mean(speedups.iter().map(pick)) / t - 1.0;
    let residuals = [
        res(|s| s.encoder, targets.encoder),
        res(|s| s.prediction, targets.prediction),
        res(|s| s.end_to_end, targets.end_to_end),
    ];
    Ok(Calibration {
        profile: p,
        speedups,
        residuals,
    })
}
