use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use tunnelwave::cli::{self, PlotKind};
use tunnelwave::dataset::Split;
use tunnelwave::Error;

#[derive(Parser)]
#[command(
    name = "tunnelwave",
    version,
    about = "Coarse/fine tunnel propagation simulation and coarse-to-fine RSS reconstruction"
)]
struct Cli {
    /// JSON run configuration (mutually exclusive with --preset).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration: tableI, figures, or massif.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// RNG seed override for training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Request bit-reproducible runs (always honored by this build).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for dataset generation and batch parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one coarse/fine simulation pair and write both RSSV1 volumes.
    Simulate,
    /// Enumerate the parameter grid, simulate pairs, write a manifest.
    Dataset {
        /// Transmitter regime: train, test, or all.
        #[arg(long, default_value = "all")]
        split: String,
        /// Keep only the first N admissible configurations.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train on a dataset manifest.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate exported weights against a manifest.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Reconstruct the fine slice at index t of a coarse volume.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        t: usize,
    },
    /// Render a slice heatmap (PGM) or an axial curve (CSV).
    Plot {
        #[arg(long)]
        volume: Option<PathBuf>,
        /// heatmap or axial.
        #[arg(long, default_value = "heatmap")]
        kind: String,
        #[arg(long, default_value_t = 0)]
        t: usize,
        #[arg(long)]
        rx_x: Option<f64>,
        #[arg(long)]
        rx_y: Option<f64>,
    },
    /// Run the built-in oracle suites; exit 0 iff everything passes.
    Selfcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn parse_split(s: &str) -> Result<Split, Error> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        "all" => Ok(Split::All),
        other => Err(Error::InvalidConfig(format!(
            "unknown split {other:?} (expected train, test or all)"
        ))),
    }
}

fn run(args: Cli) -> Result<bool, Error> {
    if let Some(workers) = args.workers {
        // Ignore the error when tests configure the pool more than once.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    let cfg = cli::load_config(args.config.as_deref(), args.preset.as_deref())?;
    let out = &args.out;
    let need = |path: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str| {
        path.clone()
            .or_else(|| fallback.clone())
            .ok_or_else(|| Error::InvalidConfig(format!("missing --{what} (or paths.{what} in the config)")))
    };
    match args.command {
        Command::Simulate => {
            cli::cmd_simulate(&cfg, out)?;
            Ok(true)
        }
        Command::Dataset { split, limit } => {
            cli::cmd_dataset(&cfg, parse_split(&split)?, out, limit)?;
            Ok(true)
        }
        Command::Train { manifest } => {
            let manifest = need(&manifest, &cfg.paths.manifest, "manifest")?;
            cli::cmd_train(&cfg, &manifest, out, args.seed)?;
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            manifest,
        } => {
            let checkpoint = need(&checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let manifest = need(&manifest, &cfg.paths.manifest, "manifest")?;
            cli::cmd_eval(&cfg, &checkpoint, &manifest, out)?;
            Ok(true)
        }
        Command::Infer {
            checkpoint,
            volume,
            t,
        } => {
            let checkpoint = need(&checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let volume = need(&volume, &cfg.paths.volume, "volume")?;
            cli::cmd_infer(&checkpoint, &volume, t, out)?;
            Ok(true)
        }
        Command::Plot {
            volume,
            kind,
            t,
            rx_x,
            rx_y,
        } => {
            let volume = need(&volume, &cfg.paths.volume, "volume")?;
            let kind: PlotKind = kind.parse()?;
            let rx = match (rx_x, rx_y) {
                (Some(x), Some(y)) => Some((x, y)),
                _ => None,
            };
            cli::cmd_plot(&volume, kind, t, rx, out)?;
            Ok(true)
        }
        Command::Selfcheck { inject_fault } => cli::cmd_selfcheck(inject_fault.as_deref()),
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
