//! Command-line front end of the THz tomographic imaging pipeline.
//!
//! Every command is driven by a JSON run config; failures are printed as a
//! machine-readable JSON object on stderr with exit codes 0 (ok),
//! 2 (configuration), 3 (numeric failure), 4 (I/O).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use thzlab::pipeline::{
    cmd_dataset, cmd_eval, cmd_gradcheck, cmd_phantom, cmd_reconstruct, cmd_restore,
    cmd_simulate, cmd_train, load_config, RunConfig,
};
use thzlab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "thzlab",
    about = "Synthetic THz tomographic imaging: simulation, restoration, reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured phantom volumes.
    Phantom {
        #[arg(long)]
        config: PathBuf,
        /// Master seed override; generating commands are deterministic in it.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate degraded multi-band projections (plus flip augmentation).
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of view angles (overrides the config).
        #[arg(long)]
        angles: Option<usize>,
        /// Angular step in degrees (overrides the config).
        #[arg(long)]
        step: Option<f64>,
    },
    /// Split views into train/val/test manifests, disjoint by family.
    Dataset {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the restoration model; writes checkpoint and metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Restore every test view with the trained model.
    Restore {
        #[arg(long)]
        config: PathBuf,
    },
    /// Assemble restored views of one phantom into a 3D volume.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        /// Phantom stem, e.g. "family-000".
        #[arg(long)]
        phantom: String,
    },
    /// PSNR/SSIM of restored test views against ground truth.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference verification of the differentiable core.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(config: &PathBuf, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { config, seed } => {
            let written = cmd_phantom(&load(&config, seed)?)?;
            println!("{}", json!({ "phantoms": written.len() }));
        }
        Command::Simulate {
            config,
            seed,
            angles,
            step,
        } => {
            let written = cmd_simulate(&load(&config, seed)?, angles, step)?;
            println!("{}", json!({ "views": written.len() }));
        }
        Command::Dataset { config } => {
            cmd_dataset(&load(&config, None)?)?;
            println!("{}", json!({ "manifests": ["train", "val", "test"] }));
        }
        Command::Train { config, seed } => {
            let records = cmd_train(&load(&config, seed)?)?;
            let last = records.last().expect("at least one epoch");
            println!(
                "{}",
                json!({ "epochs": records.len(), "final_loss": last.loss, "val_psnr": last.val_psnr })
            );
        }
        Command::Restore { config } => {
            let written = cmd_restore(&load(&config, None)?)?;
            println!("{}", json!({ "restored": written.len() }));
        }
        Command::Reconstruct { config, phantom } => {
            let path = cmd_reconstruct(&load(&config, None)?, &phantom)?;
            println!("{}", json!({ "volume": path }));
        }
        Command::Eval { config } => {
            let report = cmd_eval(&load(&config, None)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Gradcheck { seed } => {
            let report = cmd_gradcheck(seed)?;
            let pass = report["pass"] == json!(true);
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !pass {
                return Err(Error::NonFinite {
                    op: "gradcheck: analytic and numeric gradients disagree",
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.exit_code() {
                2 => "config",
                3 => "numeric",
                _ => "io",
            };
            eprintln!("{}", json!({ "error": { "kind": kind, "message": e.to_string() } }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
