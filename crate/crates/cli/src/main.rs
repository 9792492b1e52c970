//! Command-line driver: data synthesis, rotation calibration, evaluation,
//! participation-ratio analysis, and container inspection.
//!
//! Exit codes: 1 config/usage, 2 i/o, 3 numerical.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::ModeArg;
use config::RunConfig;
use rotcalib::Error;

#[derive(Parser)]
#[command(
    name = "rotcalib",
    version,
    about = "Rotation calibration for low-bit activation quantization on a toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic byte-level token data and an outlier weight recipe.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to [output].dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the synthetic data seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Calibrate rotations over the configured corpus.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Calibration mode (defaults to the config's calib.mode).
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the calibration seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score quantization error and toy NLL for each configured bit triplet.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Rotation checkpoint (CRRS) to fold and evaluate.
        #[arg(long)]
        rotations: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Participation-ratio CDFs under identity / Hadamard / calibrated rotations.
    AnalyzePr {
        #[arg(long)]
        config: PathBuf,
        /// Optional calibrated rotation checkpoint for the third variant.
        #[arg(long)]
        rotations: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Describe a container file (CRTM/CRRS/CRAD) or echo a resolved config.
    Info {
        /// Container file to inspect.
        path: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> rotcalib::Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            commands::cmd_gen_data(RunConfig::load(&config)?, out, seed)
        }
        Command::Calibrate {
            config,
            mode,
            out,
            seed,
        } => commands::cmd_calibrate(RunConfig::load(&config)?, mode, out, seed),
        Command::Evaluate {
            config,
            rotations,
            out,
        } => commands::cmd_evaluate(RunConfig::load(&config)?, &rotations, out),
        Command::AnalyzePr {
            config,
            rotations,
            out,
        } => commands::cmd_analyze_pr(RunConfig::load(&config)?, rotations.as_deref(), out),
        Command::Info { path, config } => commands::cmd_info(path.as_deref(), config.as_deref()),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) => 2,
        Error::Numerical(_) => 3,
        _ => 1,
    }
}
