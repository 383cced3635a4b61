//! `qlstm4`: train, fine-tune, pack and run quantized LSTM models, inspect
//! parameter budgets and estimate device runtimes.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2
//! when a run fails numerically (non-finite loss or activations).

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qlstm4::models::Preset;

use commands::{InferArgs, Overrides, ParamsArgs, PerfArgs, PolicyName};
use error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(
    name = "qlstm4",
    version,
    about = "4-bit quantization-aware training and inference for LSTM models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Overrides applied on top of the config file.
#[derive(clap::Args, Debug)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seed of initialization, dropout and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of epochs (0 writes the initial checkpoint only).
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            epochs: self.epochs,
            out: self.out.clone(),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Quantization-aware training from a fresh initialization.
    Train(RunArgs),
    /// Quantization-aware training initialized from a checkpoint.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint providing the initial parameters.
        #[arg(long)]
        from: PathBuf,
        /// Accept a checkpoint whose model spec hash differs.
        #[arg(long)]
        allow_mismatch: bool,
    },
    /// Parameter and compute breakdown of a preset.
    Params {
        #[arg(long, default_value = "rnnt")]
        preset: Preset,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, value_enum, default_value = "int4-bac")]
        policy: PolicyName,
        /// Frames for the compute shares.
        #[arg(long, default_value_t = 152)]
        frames: usize,
        #[arg(long, default_value_t = 16)]
        beam: usize,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pack a trained checkpoint into nibble-packed INT4 weights.
    Pack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: PathBuf,
        /// Packed model file (default: <out_dir>/model.qpk).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a packed model on the configured task's holdout set.
    Infer {
        #[arg(long)]
        config: PathBuf,
        /// Packed model file.
        #[arg(long)]
        from: PathBuf,
        /// Float checkpoint to compare against the fake-quantized forward.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Per-batch results CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimated FP16 versus INT4 runtime of the full-size transducer.
    Perf {
        /// Device profile TOML (default: the shipped calibrated profile).
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        beams: Vec<usize>,
        #[arg(long, default_value_t = 152)]
        frames: usize,
        /// Refit the profile's INT4 efficiencies and host rate first and
        /// print the result.
        #[arg(long)]
        calibrate: bool,
        /// Sweep CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refit the SAWB coefficient table by brute-force sweeps.
    FitSawb {
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        #[arg(long, default_value_t = 2021)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(r) => commands::train(&commands::load_config(&r.config, &r.overrides())?),
        Cmd::Finetune {
            run,
            from,
            allow_mismatch,
        } => commands::finetune(
            &commands::load_config(&run.config, &run.overrides())?,
            &from,
            allow_mismatch,
        ),
        Cmd::Params {
            preset,
            scale,
            policy,
            frames,
            beam,
            json,
            out,
        } => commands::params(&ParamsArgs {
            preset,
            scale,
            policy,
            frames,
            beam,
            json,
            out,
        }),
        Cmd::Pack { config, from, out } => {
            let cfg = commands::load_config(&config, &Overrides::default())?;
            let out = out.unwrap_or_else(|| cfg.out_dir.join("model.qpk"));
            commands::pack(&cfg, &from, &out)
        }
        Cmd::Infer {
            config,
            from,
            compare,
            out,
        } => commands::infer(
            &commands::load_config(&config, &Overrides::default())?,
            &InferArgs { from, compare, out },
        ),
        Cmd::Perf {
            profile,
            beams,
            frames,
            calibrate,
            out,
        } => commands::perf(&PerfArgs {
            profile,
            beams,
            frames,
            calibrate,
            out,
        }),
        Cmd::FitSawb { samples, seed, out } => commands::fit_sawb(samples, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Core(qlstm4::Error::PolicyMismatch(_)) = e {
                eprintln!("hint: packing needs odd-level symmetric INT4 weights and symmetric activations");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
