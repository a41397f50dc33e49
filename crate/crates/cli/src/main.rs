use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rvseg::commands::{self, Ui};
use rvseg::config::RunConfig;
use rvseg::error::CliError;

#[derive(Parser)]
#[command(
    name = "rvseg",
    version,
    about = "Range-view LiDAR segmentation: generate data, train, corrupt, evaluate"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's output_dir.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed override for model init and training.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Suppress progress output; errors still print.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic training and eval scans plus a manifest.
    GenData,
    /// Train on the clean split of a dataset; writes a checkpoint.
    Train {
        /// Dataset directory (from gen-data).
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Score a checkpoint per condition; writes report.csv / report.json.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Project one scan to a range image and dump it.
    Project {
        /// Scan file (.bin; a sibling .label is picked up when present).
        #[arg(long, value_name = "PATH")]
        scan: PathBuf,
    },
    /// Render a checkpoint's weight map, memory usage, and layer stats.
    Inspect {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        scan: PathBuf,
    },
    /// Train every toggle combination and tabulate per-condition mIoU.
    Ablate {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Parse and validate the configuration, then print it resolved.
    Validate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    check_thread_env()?;

    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds.master = seed;
    }
    let out_dir = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let ui = Ui { quiet: cli.quiet };

    match cli.cmd {
        Cmd::GenData => commands::gen_data::run(&cfg, &out_dir, ui),
        Cmd::Train { data } => commands::train::run(&cfg, &data, &out_dir, ui),
        Cmd::Eval { checkpoint, data } => {
            commands::eval::run(&cfg, &checkpoint, &data, &out_dir, ui)
        }
        Cmd::Project { scan } => commands::project::run(&cfg, &scan, &out_dir, ui),
        Cmd::Inspect { checkpoint, scan } => {
            commands::inspect::run(&checkpoint, &scan, &out_dir, ui)
        }
        Cmd::Ablate { data } => commands::ablate::run(&cfg, &data, &out_dir, ui).map(|_| ()),
        Cmd::Validate => {
            // Load already validated; print the resolved document so the
            // effective defaults are visible.
            let text = toml::to_string_pretty(&cfg)
                .map_err(|e| CliError::Config(format!("cannot render config: {e}")))?;
            print!("{text}");
            Ok(())
        }
    }
}

/// `RVSEG_THREADS` is validated for forward compatibility; the engine
/// itself runs single-threaded, so any allowed value caps at 1 worker.
fn check_thread_env() -> Result<(), CliError> {
    match std::env::var("RVSEG_THREADS") {
        Err(_) => Ok(()),
        Ok(raw) => match raw.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(CliError::Config(format!(
                "RVSEG_THREADS = {raw:?} is not a positive integer"
            ))),
        },
    }
}
