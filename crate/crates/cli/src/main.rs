//! `gatiaa` — graph-attention score-distribution models from the shell:
//! synthetic datasets, graph assembly, training, evaluation, variant
//! ablations, and gradient verification.
//!
//! Configuration flows file → `--set` overrides → dedicated flags, every
//! command echoes the effective configuration it ran with, and reruns with
//! the same config and seed reproduce output files byte for byte.
//!
//! Exit codes: 0 success, 1 verification failure (a gradient check unit
//! over threshold), 2 usage or input error.

mod cmd;
mod config;

use clap::{Parser, Subcommand};
use config::{CliError, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "gatiaa",
    version,
    about = "Graph-attention regression of 10-bin score distributions over image feature graphs"
)]
struct Cli {
    /// Flat key=value config file; `#` starts a comment.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Pins the data seed and train.seed in one flag.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Force serial execution (one evaluation worker).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory (output file for build-graph).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Override one config key, e.g. --set model.d_enc=64; repeatable,
    /// applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate planted-signal graphs plus a train/val/test manifest.
    Synth {
        /// Number of graphs; overrides synth.count.
        #[arg(long, value_name = "N")]
        count: Option<usize>,
    },
    /// Assemble raw float32 feature-map dumps (with {d,w,h} JSON sidecars)
    /// into one graph file.
    BuildGraph {
        #[arg(required = true, value_name = "MAP")]
        inputs: Vec<PathBuf>,
    },
    /// Train on a manifest's train/val splits; --out enables checkpoints.
    Train {
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Continue from a checkpoint; epoch numbering and the decay
        /// schedule pick up where it stopped.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest split and write report CSVs.
    Eval {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
    },
    /// Train all six model variants on shared data/budget; write the
    /// comparison table.
    Ablate {
        /// Number of generated graphs; overrides ablate.count.
        #[arg(long, value_name = "N")]
        count: Option<usize>,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        /// Probe half-step override (a grossly wrong step must make the
        /// run fail — that is the checker's own test hook).
        #[arg(long, value_name = "H")]
        step: Option<f64>,
        /// Cap on probed coordinates per tensor.
        #[arg(long, value_name = "N")]
        max_coords: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for assignment in &cli.set {
        cfg.apply_set(assignment)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(out) = cli.out {
        cfg.out = Some(out);
    }

    match cli.command {
        Command::Synth { count } => {
            if let Some(c) = count {
                cfg.synth_count = c;
            }
            cmd::synth::run(&cfg)?;
            Ok(0)
        }
        Command::BuildGraph { inputs } => {
            cmd::build_graph::run(&cfg, &inputs)?;
            Ok(0)
        }
        Command::Train { manifest, resume } => {
            cmd::train::run(&cfg, &manifest, resume.as_deref())?;
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            manifest,
        } => {
            cmd::eval::run(&cfg, &checkpoint, &manifest)?;
            Ok(0)
        }
        Command::Ablate { count } => {
            if let Some(c) = count {
                cfg.ablate_count = c;
            }
            cmd::ablate::run(&cfg)?;
            Ok(0)
        }
        Command::Gradcheck { step, max_coords } => cmd::gradcheck::run(&cfg, step, max_coords),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
