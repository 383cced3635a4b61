//! Statistics-aware weight binning.
//!
//! The clip bound is a bit-width dependent linear combination of the
//! tensor's second and first absolute moments,
//!
//! ```text
//! alpha = min(c1 * sqrt(E[y^2]) + c2 * E[|y|], max|y|)
//! ```
//!
//! The ratio `E[|y|] / sqrt(E[y^2])` is first clamped to the range spanned by
//! the fitting families (Laplace `1/√2` to uniform `√3/2`), so strongly
//! concentrated tensors do not extrapolate the linear fit.
//!
//! The coefficients ship in `data/sawb_coefficients.txt` and are produced by
//! [`fit_table`]: for each family of sample distributions (Gaussian, Laplace,
//! uniform) the MSE-optimal bound is found by brute-force sweep, and
//! `(c1, c2)` is the least-squares fit of those optima after normalising each
//! family to unit RMS. Capping at `max|y|` keeps constant tensors exact.
//!
//! Table format (v1): `#` comments, then one `bits level_mode c1 c2` row per
//! line with `level_mode` either `full` or `odd`.

use std::fmt::Write as _;
use std::sync::OnceLock;

use super::{ClipBounds, LevelGrid, LevelMode, QuantSpec, QuantStats, Scheme, DEGENERATE_ALPHA};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// `E|y| / rms` of Laplace and uniform samples.
pub const RATIO_RANGE: (f64, f64) = (std::f64::consts::FRAC_1_SQRT_2, 0.866_025_403_784_438_6);

const BUILTIN: &str = include_str!("../../data/sawb_coefficients.txt");

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SawbEntry {
    pub bits: u32,
    pub level_mode: LevelMode,
    pub c1: f64,
    pub c2: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SawbTable {
    entries: Vec<SawbEntry>,
}

impl SawbTable {
    pub fn builtin() -> &'static SawbTable {
        static TABLE: OnceLock<SawbTable> = OnceLock::new();
        TABLE.get_or_init(|| SawbTable::parse(BUILTIN).expect("shipped SAWB table is valid"))
    }

    pub fn new(entries: Vec<SawbEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[SawbEntry] {
        &self.entries
    }

    pub fn get(&self, bits: u32, level_mode: LevelMode) -> Option<&SawbEntry> {
        self.entries
            .iter()
            .find(|e| e.bits == bits && e.level_mode == level_mode)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::invalid(format!("SAWB table line {}: `{line}`", lineno + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let level_mode = match f[1] {
                "full" => LevelMode::Full,
                "odd" => LevelMode::Odd,
                _ => return Err(bad()),
            };
            entries.push(SawbEntry {
                bits: f[0].parse().map_err(|_| bad())?,
                level_mode,
                c1: f[2].parse().map_err(|_| bad())?,
                c2: f[3].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(
            "# qlstm4 SAWB coefficient table, format v1\n\
             # alpha = min(c1 * sqrt(E[y^2]) + c2 * E[|y|], max|y|)\n\
             # bits level_mode c1 c2\n",
        );
        for e in &self.entries {
            let mode = match e.level_mode {
                LevelMode::Full => "full",
                LevelMode::Odd => "odd",
            };
            writeln!(s, "{} {} {:.9} {:.9}", e.bits, mode, e.c1, e.c2).unwrap();
        }
        s
    }

    pub fn bounds(
        &self,
        stats: &QuantStats,
        bits: u32,
        level_mode: LevelMode,
    ) -> Result<ClipBounds> {
        let e = self.get(bits, level_mode).ok_or_else(|| {
            Error::invalid(format!(
                "no SAWB coefficients for {bits} bits / {level_mode:?}"
            ))
        })?;
        if stats.max_abs <= 0.0 {
            return Ok(ClipBounds::symmetric(DEGENERATE_ALPHA));
        }
        let rms = stats.mean_sq.sqrt();
        let ratio = (stats.mean_abs / rms).clamp(RATIO_RANGE.0, RATIO_RANGE.1);
        let alpha = (rms * (e.c1 + e.c2 * ratio)).min(stats.max_abs);
        Ok(ClipBounds::symmetric(alpha.max(DEGENERATE_ALPHA)))
    }
}

/// SAWB bounds from the shipped table.
///
/// Panics if the shipped table lacks `(bits, level_mode)`; it covers 2..=8
/// bits in both level modes.
pub fn bounds_sawb(stats: &QuantStats, bits: u32, level_mode: LevelMode) -> ClipBounds {
    SawbTable::builtin()
        .bounds(stats, bits, level_mode)
        .expect("builtin SAWB table covers every supported bit-width")
}

/// Mean squared quantization error of `samples` under symmetric bound `alpha`.
pub fn quant_mse(samples: &[f64], alpha: f64, bits: u32, level_mode: LevelMode) -> f64 {
    let spec = QuantSpec::symmetric(Scheme::Sawb, bits, level_mode);
    let grid = LevelGrid::new(&spec, &ClipBounds::symmetric(alpha)).expect("valid grid");
    let table: Vec<f64> = (0..grid.levels()).map(|j| grid.level(j)).collect();
    samples
        .iter()
        .map(|&y| {
            let d = y - table[grid.index(y)];
            d * d
        })
        .sum::<f64>()
        / samples.len() as f64
}

/// Brute-force sweep of `steps` evenly spaced bounds in `[lo, hi]`.
/// Returns `(best_alpha, best_mse)`.
pub fn sweep_best_alpha(
    samples: &[f64],
    bits: u32,
    level_mode: LevelMode,
    lo: f64,
    hi: f64,
    steps: usize,
) -> (f64, f64) {
    let mut best = (lo, f64::INFINITY);
    for i in 0..steps {
        let a = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
        let m = quant_mse(samples, a, bits, level_mode);
        if m < best.1 {
            best = (a, m);
        }
    }
    best
}

/// Sample families the coefficients are fitted over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Gaussian,
    Laplace,
    Uniform,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Gaussian, Family::Laplace, Family::Uniform];

    pub fn sample(self, n: usize, rng: &mut Rng) -> Vec<f64> {
        (0..n)
            .map(|_| match self {
                Family::Gaussian => rng.normal(),
                Family::Laplace => rng.laplace(),
                Family::Uniform => rng.uniform(-1.0, 1.0),
            })
            .collect()
    }
}

/// Fit `(c1, c2)` for one bit-width and level mode.
pub fn fit_entry(bits: u32, level_mode: LevelMode, n: usize, seed: u64) -> SawbEntry {
    let mut rows = Vec::new();
    for (i, fam) in Family::ALL.iter().enumerate() {
        let mut rng = Rng::new(seed).fork(i as u64);
        let ys = fam.sample(n, &mut rng);
        let st = QuantStats::of_slice(&ys);
        let rms = st.mean_sq.sqrt();
        // wide coarse sweep, then a fine sweep around the winner
        let (coarse, _) = sweep_best_alpha(&ys, bits, level_mode, 0.1 * rms, 16.0 * rms, 400);
        let w = 16.0 * rms / 400.0;
        let (best, _) = sweep_best_alpha(
            &ys,
            bits,
            level_mode,
            (coarse - w).max(0.01 * rms),
            coarse + w,
            101,
        );
        rows.push((st.mean_abs / rms, best / rms));
    }
    // least squares of alpha/rms = c1 + c2 * (E|y| / rms)
    let n = rows.len() as f64;
    let sx: f64 = rows.iter().map(|r| r.0).sum();
    let sy: f64 = rows.iter().map(|r| r.1).sum();
    let sxx: f64 = rows.iter().map(|r| r.0 * r.0).sum();
    let sxy: f64 = rows.iter().map(|r| r.0 * r.1).sum();
    let c2 = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let c1 = (sy - c2 * sx) / n;
    SawbEntry {
        bits,
        level_mode,
        c1,
        c2,
    }
}

/// Fit the full table for 2..=8 bits in both level modes.
pub fn fit_table(n: usize, seed: u64) -> SawbTable {
    let mut entries = Vec::new();
    for bits in 2..=8 {
        for mode in [LevelMode::Full, LevelMode::Odd] {
            entries.push(fit_entry(bits, mode, n, seed));
        }
    }
    SawbTable { entries }
}
