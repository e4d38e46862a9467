use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcvae_cli::commands;
use dcvae_cli::config::{RunConfig, Settings};
use dcvae_cli::error::CliError;

/// Dizygotic conditional VAE: feature synthesis and few-shot evaluation.
#[derive(Parser)]
#[command(name = "dcvae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file with dotted keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads for episode evaluation; 1 is the serial reference.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Dotted-key overrides, e.g. `--episode.n_way 5 --hyper.lambda=1`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the train bank; writes a checkpoint and the training log.
    Pretrain(Common),
    /// Fine-tune the checkpoint on one sampled support set.
    Finetune(Common),
    /// Episodic evaluation on the test bank.
    Eval(Common),
    /// One evaluation per value of a hyperparameter axis.
    Sweep {
        /// lambda | k | n | absence_grid | feature_combo | loss_ablation
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values; the protocol grid when omitted.
        #[arg(long)]
        values: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Write synthetic features for test classes.
    Generate(Common),
    /// Compare analytic and finite-difference gradients on a small model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Feature, semantic and latent widths.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [16, 4, 8])]
        dims: Vec<usize>,
        /// Test hook: perturb one analytic cell, e.g. `rc:R_s`.
        #[arg(long, value_name = "TERM:GROUP")]
        corrupt_gradient: Option<String>,
    },
    /// Write the seeded synthetic benchmark banks.
    SynthBank {
        /// Output directory (same as `--synth.out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn settings(common: &Common, extra: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
    let mut s = Settings::default();
    if let Some(path) = &common.config {
        s.apply_file(path)?;
    }
    s.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        s.set("seed", &seed.to_string())?;
    }
    if let Some(w) = common.workers {
        s.set("workers", &w.to_string())?;
    }
    for (key, value) in extra {
        if let Some(v) = value {
            s.set(key, v)?;
        }
    }
    RunConfig::from_settings(&s)
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain(c) => commands::cmd_pretrain(&settings(&c, &[])?, out),
        Command::Finetune(c) => commands::cmd_finetune(&settings(&c, &[])?, out),
        Command::Eval(c) => commands::cmd_eval(&settings(&c, &[])?, out).map(drop),
        Command::Sweep { axis, values, common } => {
            let cfg = settings(&common, &[("sweep.axis", axis), ("sweep.values", values)])?;
            commands::cmd_sweep(&cfg, out).map(drop)
        }
        Command::Generate(c) => commands::cmd_generate(&settings(&c, &[])?, out),
        Command::Gradcheck {
            seed,
            dims,
            corrupt_gradient,
        } => {
            let corrupt = corrupt_gradient.as_deref().map(commands::parse_corruption).transpose()?;
            commands::cmd_gradcheck(seed, [dims[0], dims[1], dims[2]], corrupt, out).map(drop)
        }
        Command::SynthBank { out: dir, common } => {
            let dir = dir.map(|d| d.display().to_string());
            commands::cmd_synth_bank(&settings(&common, &[("synth.out_dir", dir)])?, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
