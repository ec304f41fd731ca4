//! `superatom` command-line driver.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error. Failures print
//! `{"error": {"kind": ..., "message": ...}}` on stderr.

mod commands;
mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "superatom", version, about = "Simulate, sweep and calibrate superatom decay traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "SUPERATOM_THREADS", default_value_t = 0)]
    threads: usize,

    /// Format of what is printed on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write one trace file per pulse length.
    Simulate,
    /// Fit the decay after every pulse length and report γ and I₀.
    Sweep,
    /// Fit the four-level model to recorded traces.
    Calibrate,
    /// Check a config without running it.
    ValidateConfig,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain { kind: &'static str, message: String },
}

impl CliError {
    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Domain {
            kind: "io",
            message: format!("{}: {e}", path.display()),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain { .. } => 1,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        let (kind, message) = match self {
            CliError::Usage(m) => ("usage", m.as_str()),
            CliError::Domain { kind, message } => (*kind, message.as_str()),
        };
        json!({ "error": { "kind": kind, "message": message } })
    }
}

impl From<superatom::Error> for CliError {
    fn from(e: superatom::Error) -> Self {
        use superatom::Error as E;
        let kind = match &e {
            E::File { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "file_not_found",
            E::File { .. } | E::Io(_) => "io",
            E::Json(_) | E::Csv(_) => "parse",
            E::InvalidParameter(_) | E::DimensionMismatch { .. } | E::InvalidGrid(_) => "invalid_input",
            E::InsufficientData { .. } | E::Degenerate(_) => "insufficient_data",
            E::NonConvergence(_) | E::StepSizeUnderflow { .. } => "numerical",
            E::InvariantViolation { .. } => "invariant_violation",
        };
        CliError::Domain {
            kind,
            message: e.to_string(),
        }
    }
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut cfg = RunConfig::load(path).map_err(CliError::Usage)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<commands::Output, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let cfg = load(cli)?;
    match cli.command {
        Command::Simulate => commands::simulate(&cfg, cli.format),
        Command::Sweep => commands::sweep(&cfg, cli.format),
        Command::Calibrate => commands::calibrate(&cfg, cli.format),
        Command::ValidateConfig => commands::validate_config(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim_end().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code());
        }
    };
    match run(&cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(out.stdout.as_bytes());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code())
        }
    }
}
