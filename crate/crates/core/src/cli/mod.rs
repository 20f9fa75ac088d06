//! Command-line front end: file formats, dataset layout, run configuration,
//! and one function per subcommand.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod io;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::{DemoConfig, MaskChoice, RunConfig};

/// Process exit statuses.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const NUMERICAL: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {msg}", .path.display())]
    Format { path: PathBuf, msg: String },

    #[error("{}:{line}: {msg}", .path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("no frames found in {}", .0.display())]
    EmptyDataset(PathBuf),

    #[error("frame count mismatch ({what}): {left} vs {right}")]
    FrameCount { what: String, left: usize, right: usize },

    #[error("all {0} frames failed")]
    AllFramesFailed(usize),

    #[error(transparent)]
    Library(#[from] crate::Error),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    pub fn parse(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        CliError::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn csv(e: csv::Error) -> Self {
        CliError::Other(format!("csv: {e}"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } | CliError::Format { .. } | CliError::Parse { .. } | CliError::EmptyDataset(_) => exit::IO,
            CliError::AllFramesFailed(_) => exit::NUMERICAL,
            CliError::Library(e) if e.is_numerical() => exit::NUMERICAL,
            _ => exit::OTHER,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "scalerec", version, about = "Metric scale recovery from a known camera height")]
pub struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Directory for outputs.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    pub output: PathBuf,

    /// Subcommand-specific mode: height estimator (weighted-ls|median),
    /// depth scaling (none|gt-median|cam-height), or variant
    /// (none|ts-only|ds-only|ts+ds).
    #[arg(long, global = true)]
    pub mode: Option<String>,

    /// Overrides the scene seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; defaults to one per core.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Render the configured scene into a dataset directory.
    SynthGen,
    /// Fit the ground plane of every frame.
    FitPlane,
    /// Per-frame scale factors from the known camera height.
    EstimateScale,
    /// IRLS ground segmentation of every frame.
    SegmentGround,
    /// Rescale estimated poses with per-frame scale factors.
    RescaleOdometry,
    /// Depth metrics of predictions against ground truth.
    EvalDepth,
    /// Segment errors of estimated poses against ground truth.
    EvalOdometry,
    /// Run the toy scale-convergence optimization.
    DemoConverge,
    /// Run the toy optimization for every scaling variant.
    Ablate,
}

/// Loads the configuration, applies flag overrides, and runs the command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        // Fails only if a pool already exists, which is harmless.
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::debug!("thread pool not rebuilt: {e}");
        }
    }
    let ctx = commands::Context {
        config,
        output: cli.output.clone(),
        mode: cli.mode.clone(),
    };
    commands::dispatch(cli.command, &ctx)
}

/// Entry point shared by the binary: parses arguments, runs, and maps the
/// outcome to an exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
