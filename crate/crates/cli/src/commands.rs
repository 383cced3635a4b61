use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use qlstm4::int4rt::{argmax_rows, reference, PackedModel};
use qlstm4::models::{
    build_preset, param_report, ActScheme, Network, ParamReport, Preset, PresetOptions, QuantPolicy,
};
use qlstm4::numerics::{Rng, Tensor};
use qlstm4::perf::{
    calibrate, rnnt_pair, speedup, sweep, sweep_csv, CalibrationTargets, DeviceProfile,
    WorkloadSpec,
};
use qlstm4::quant::{LevelMode, Scheme};
use qlstm4::train::{
    current_bounds, metrics_csv, train_qat, write_atomic, Batch, Checkpoint, Optimizer,
    OptimizerState, RngState, TrainConfig,
};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.ql4";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "run.toml";

/// Command-line overrides shared by the config-driven commands.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn load_config(path: &Path, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_atomic(path, bytes).map_err(|e| match e {
        qlstm4::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    })
}

/// One line per activation quantizer with a known or learned bound.
fn log_quantizers(net: &Network<f32>) {
    let acts = net.spec.activations();
    let bounds = current_bounds(net);
    for a in &acts {
        if let Some(b) = bounds.get(&a.name) {
            let kind = if a.quantizer.is_learnable() {
                "learned"
            } else {
                "fixed"
            };
            eprintln!(
                "quantizer {}: {:?} {kind} bound {b}",
                a.name, a.quantizer.spec.scheme
            );
        }
    }
}

/// Train from `init` (a fresh network or a checkpoint's parameters) and
/// write the checkpoint, metrics CSV and resolved config.
fn run_training(cfg: &RunConfig, net: Network<f32>) -> Result<()> {
    log_quantizers(&net);
    let out = &cfg.out_dir;
    write(&out.join(RESOLVED_CONFIG_FILE), cfg.to_toml().as_bytes())?;
    if cfg.epochs == 0 {
        let ck = Checkpoint {
            spec_hash: net.spec.spec_hash(),
            epoch: 0,
            rng: RngState::of(&Rng::new(cfg.seed)),
            params: net.params,
            optimizer: OptimizerState::default(),
            packed: BTreeMap::new(),
        };
        write(&out.join(CHECKPOINT_FILE), &ck.to_bytes())?;
        println!(
            "wrote initial checkpoint {}",
            out.join(CHECKPOINT_FILE).display()
        );
        return Ok(());
    }

    let data = cfg.dataset()?;
    let opt = Optimizer::new(cfg.optimizer.clone())?;
    let sites: Vec<String> = current_bounds(&net).into_keys().collect();
    let outcome = train_qat(
        net,
        &data,
        opt,
        &cfg.schedule,
        &TrainConfig {
            epochs: cfg.epochs,
            seed: cfg.seed,
            start_epoch: 0,
        },
    )?;
    for m in &outcome.metrics {
        println!(
            "epoch {:3}  lr {:.3e}  train_loss {:.4}  holdout_loss {:.4}  accuracy {:.4}",
            m.epoch, m.lr, m.train_loss, m.holdout_loss, m.accuracy
        );
    }
    write(&out.join(CHECKPOINT_FILE), &outcome.checkpoint().to_bytes())?;
    write(
        &out.join(METRICS_FILE),
        metrics_csv(&outcome.metrics, &sites).as_bytes(),
    )?;
    println!(
        "wrote {} and {}",
        out.join(CHECKPOINT_FILE).display(),
        out.join(METRICS_FILE).display()
    );
    match outcome.diverged {
        Some(epoch) => Err(qlstm4::Error::Diverged { epoch }.into()),
        None => Ok(()),
    }
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.model_spec()?;
    let net = Network::init(spec, &mut Rng::new(cfg.seed));
    run_training(cfg, net)
}

/// Load `path` as parameters for the configured model.
fn load_network(cfg: &RunConfig, path: &Path, allow_mismatch: bool) -> Result<Network<f32>> {
    let spec = cfg.model_spec()?;
    let ck = Checkpoint::load(path, Some(spec.spec_hash()), allow_mismatch)
        .map_err(|e| with_path(e, path))?;
    Ok(Network::from_params(spec, ck.params).map_err(|e| with_path(e, path))?)
}

fn with_path(e: qlstm4::Error, path: &Path) -> CliError {
    match e {
        qlstm4::Error::Io(io) => CliError::io(path, io),
        qlstm4::Error::Checkpoint(msg) => CliError::Usage(format!("{}: {msg}", path.display())),
        other => other.into(),
    }
}

pub fn finetune(cfg: &RunConfig, from: &Path, allow_mismatch: bool) -> Result<()> {
    let net = load_network(cfg, from, allow_mismatch)?;
    run_training(cfg, net)
}

/// Named policies for `params`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PolicyName {
    Fp32,
    Int8Max,
    Int4Bac,
    Int4Pact,
    Int4Max,
}

impl PolicyName {
    pub fn policy(self, preset: Preset) -> QuantPolicy {
        match self {
            PolicyName::Fp32 => QuantPolicy::fp32(),
            PolicyName::Int8Max => QuantPolicy::uniform(8, Scheme::Max, ActScheme::Max),
            PolicyName::Int4Bac => QuantPolicy::int4_bac(preset == Preset::Rnnt),
            PolicyName::Int4Pact => QuantPolicy::uniform(4, Scheme::Sawb, ActScheme::Pact),
            PolicyName::Int4Max => QuantPolicy {
                weight_levels: LevelMode::Full,
                act_levels: LevelMode::Full,
                ..QuantPolicy::uniform(4, Scheme::Max, ActScheme::Max)
            },
        }
    }
}

pub struct ParamsArgs {
    pub preset: Preset,
    pub scale: f64,
    pub policy: PolicyName,
    pub frames: usize,
    pub beam: usize,
    pub json: bool,
    pub out: Option<PathBuf>,
}

pub fn params_report(a: &ParamsArgs) -> Result<ParamReport> {
    let spec = build_preset(
        a.preset,
        a.scale,
        &a.policy.policy(a.preset),
        &PresetOptions::default(),
    )?;
    Ok(param_report(&spec, a.frames, a.beam))
}

pub fn format_report(r: &ParamReport) -> String {
    let pct = |x: f64| format!("{:.1}%", 100.0 * x);
    let mut s = format!("model {}: {} parameters\n", r.model, r.total);
    writeln!(
        s,
        "{:<16} {:<11} {:>12} {:>8}",
        "layer", "component", "params", "weights"
    )
    .unwrap();
    for l in &r.layers {
        let comp = serde_json::to_value(l.component).unwrap();
        writeln!(
            s,
            "{:<16} {:<11} {:>12} {:>8}",
            l.name,
            comp.as_str().unwrap_or("?"),
            l.params,
            l.precision
        )
        .unwrap();
    }
    for (p, f) in &r.fractions {
        writeln!(s, "{p} share: {}", pct(*f)).unwrap();
    }
    writeln!(s, "quantized share: {}", pct(r.quantized_fraction)).unwrap();
    writeln!(s, "first layer share: {}", pct(r.first_layer_fraction)).unwrap();
    for (c, n) in &r.by_component {
        let comp = serde_json::to_value(c).unwrap();
        writeln!(
            s,
            "{} share: {}",
            comp.as_str().unwrap_or("?"),
            pct(*n as f64 / r.total as f64)
        )
        .unwrap();
    }
    writeln!(
        s,
        "first layer compute share ({} frames, beam {}): {}",
        r.seq_len,
        r.beam,
        pct(r.first_layer_compute_fraction)
    )
    .unwrap();
    s
}

pub fn params(a: &ParamsArgs) -> Result<()> {
    let r = params_report(a)?;
    let json = serde_json::to_string_pretty(&r).expect("report serializes") + "\n";
    if a.json {
        print!("{json}");
    } else {
        print!("{}", format_report(&r));
    }
    if let Some(out) = &a.out {
        write(out, json.as_bytes())?;
    }
    Ok(())
}

pub fn pack(cfg: &RunConfig, from: &Path, out: &Path) -> Result<()> {
    let net = load_network(cfg, from, false)?;
    let floats: usize = net.params.values().map(|t| t.len() * 4).sum();
    let packed = PackedModel::pack(&net)?;
    write(out, &packed.to_checkpoint().to_bytes())?;
    println!(
        "packed {} tensors: {} bytes of nibbles (float parameters {} bytes) -> {}",
        packed.packed.len(),
        packed.packed_bytes(),
        floats,
        out.display()
    );
    Ok(())
}

pub struct InferArgs {
    pub from: PathBuf,
    pub compare: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Holdout accuracy of the packed model and, with a float checkpoint to
/// compare against, the largest deviation from the fake-quantized forward.
pub fn infer(cfg: &RunConfig, a: &InferArgs) -> Result<()> {
    let spec = cfg.model_spec()?;
    let ck = Checkpoint::load(&a.from, Some(spec.spec_hash()), false)
        .map_err(|e| with_path(e, &a.from))?;
    let model = PackedModel::from_checkpoint(spec, &ck).map_err(|e| with_path(e, &a.from))?;
    let rt = model.runtime()?;
    let reference_net = match &a.compare {
        Some(p) => Some(load_network(cfg, p, false)?),
        None => None,
    };
    let data = cfg.dataset()?;

    let mut csv = String::from("batch,correct,total,max_abs_dev\n");
    let (mut correct, mut total, mut worst) = (0usize, 0usize, 0.0f64);
    for (i, batch) in data.holdout.iter().enumerate() {
        let (out, labels, refs): (Vec<Tensor<f32>>, &Vec<Vec<usize>>, Option<Vec<Tensor<f32>>>) =
            match batch {
                Batch::Frames(b) => (
                    rt.framewise(&b.xs)?,
                    &b.labels,
                    reference_net
                        .as_ref()
                        .map(|n| reference::framewise(n, &b.xs))
                        .transpose()?,
                ),
                Batch::Tokens(b) => (
                    rt.lm_logits(&b.inputs)?,
                    &b.targets,
                    reference_net
                        .as_ref()
                        .map(|n| reference::lm_logits(n, &b.inputs))
                        .transpose()?,
                ),
            };
        let (mut c, mut n) = (0, 0);
        for (t, ys) in out.iter().zip(labels) {
            for (p, y) in argmax_rows(t).into_iter().zip(ys) {
                c += usize::from(p == *y);
                n += 1;
            }
        }
        let dev = refs.map(|r| {
            r.iter()
                .zip(&out)
                .flat_map(|(x, y)| {
                    x.data()
                        .iter()
                        .zip(y.data())
                        .map(|(a, b)| (a - b).abs() as f64)
                })
                .fold(0.0, f64::max)
        });
        let dev_text = dev.map(|d| d.to_string()).unwrap_or_default();
        writeln!(csv, "{i},{c},{n},{dev_text}").unwrap();
        correct += c;
        total += n;
        worst = worst.max(dev.unwrap_or(0.0));
    }
    println!(
        "holdout accuracy {:.4} ({correct}/{total})",
        correct as f64 / total.max(1) as f64
    );
    if reference_net.is_some() {
        println!("max abs deviation from fake-quant forward {worst:e}");
    }
    if let Some(out) = &a.out {
        write(out, csv.as_bytes())?;
    }
    Ok(())
}

pub struct PerfArgs {
    pub profile: Option<PathBuf>,
    pub beams: Vec<usize>,
    pub frames: usize,
    pub calibrate: bool,
    pub out: Option<PathBuf>,
}

pub fn perf(a: &PerfArgs) -> Result<()> {
    let mut profile = match &a.profile {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            DeviceProfile::from_toml(&text).map_err(|e| CliError::Config {
                path: p.clone(),
                msg: e.to_string(),
            })?
        }
        None => DeviceProfile::default_profile(),
    };
    if a.calibrate {
        let cal = calibrate(&profile, &CalibrationTargets::default())?;
        eprintln!(
            "calibration residuals (encoder, prediction, end-to-end): {:?}",
            cal.residuals
        );
        profile = cal.profile;
    }
    if a.beams.is_empty() || a.beams.contains(&0) {
        return Err(CliError::Usage("--beams needs positive beam widths".into()));
    }

    let (fp, q) = rnnt_pair()?;
    let mut workloads = Vec::new();
    for &b in &a.beams {
        for (label, spec) in [("fp16", &fp), ("int4", &q)] {
            let mut w = WorkloadSpec::new(spec.clone(), b);
            w.frames = a.frames;
            w.validate()?;
            workloads.push((label.to_string(), w));
        }
    }
    let rows = sweep(&workloads, &profile)?;
    println!("device {}", profile.name);
    println!(
        "{:>5} {:>9} {:>11} {:>7} {:>11}",
        "beam", "encoder", "prediction", "joint", "end-to-end"
    );
    for pair in rows.chunks(2) {
        let s = speedup(&pair[0].breakdown, &pair[1].breakdown, pair[0].beam);
        println!(
            "{:>5} {:>8.2}x {:>10.2}x {:>6.2}x {:>10.2}x",
            s.beam, s.encoder, s.prediction, s.joint, s.end_to_end
        );
    }
    if let Some(out) = &a.out {
        write(out, sweep_csv(&rows).as_bytes())?;
    }
    if a.calibrate {
        print!("{}", profile.to_toml());
    }
    Ok(())
}

pub fn fit_sawb(samples: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    if samples < 1000 {
        return Err(CliError::Usage("--samples must be at least 1000".into()));
    }
    let text = qlstm4::quant::sawb::fit_table(samples, seed).to_text();
    match out {
        Some(p) => write(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}
