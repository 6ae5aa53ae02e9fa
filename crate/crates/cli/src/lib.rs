//! `uqt`: batch entry points for the user tokenizer pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or file
//! format error, 3 numerical failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

pub use commands::*;
pub use config::{Overrides, Precision, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(uqt_core::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for CliError {}

impl From<uqt_core::Error> for CliError {
    fn from(e: uqt_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "uqt", version, about = "Quantize multi-source user embeddings into token sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON or TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// Output directory; also the default location of every input.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.model.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-source dataset.
    Synth,
    /// Train the quantizer and write a checkpoint.
    Train,
    /// Turn every user into a token sequence.
    Tokenize,
    /// Align fused tokens with behavior-text embeddings.
    Align,
    /// Fit a linear probe on token features.
    Probe,
    /// Write codebook utilization and quantized-vector exports.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Tokenize => "tokenize",
            Command::Align => "align",
            Command::Probe => "probe",
            Command::Report => "report",
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("UQT_LOG", "info");
    // A second call in the same process (tests) keeps the first logger.
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn dispatch<T: uqt_core::ndmath::Real>(cmd: Command, cfg: &RunConfig) -> Result<String, CliError> {
    let json = |v: &dyn erased::Summary| v.to_json();
    Ok(match cmd {
        Command::Synth => {
            let s = cmd_synth(cfg)?;
            format!("{} records ({} users × {} sources)", s.records, s.users, s.sources)
        }
        Command::Train => json(&cmd_train::<T>(cfg)?),
        Command::Tokenize => json(&cmd_tokenize::<T>(cfg)?),
        Command::Align => json(&cmd_align::<T>(cfg)?),
        Command::Probe => json(&cmd_probe::<T>(cfg)?),
        Command::Report => json(&cmd_report::<T>(cfg)?),
    })
}

mod erased {
    pub trait Summary {
        fn to_json(&self) -> String;
    }

    impl<S: serde::Serialize> Summary for S {
        fn to_json(&self) -> String {
            serde_json::to_string(self).expect("summary serializes")
        }
    }
}

/// Resolves the config, writes it to `<out>/<command>.config.json` and runs
/// the command.
pub fn execute(cmd: Command, overrides: &Overrides) -> Result<String, CliError> {
    let cfg = RunConfig::resolve(overrides)?;
    let resolved = serde_json::to_string_pretty(&cfg).expect("config serializes");
    info!("resolved config:\n{resolved}");
    if cfg.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global() {
            warn!("thread pool already configured: {e}");
        }
    }
    std::fs::create_dir_all(&cfg.out).map_err(|e| uqt_core::Error::File {
        path: cfg.out.clone(),
        source: e,
    })?;
    let cfg_path = cfg.out_path(&format!("{}.config.json", cmd.name()));
    std::fs::write(&cfg_path, &resolved).map_err(|e| uqt_core::Error::File { path: cfg_path, source: e })?;
    match cfg.precision {
        Precision::F32 => dispatch::<f32>(cmd, &cfg),
        Precision::F64 => dispatch::<f64>(cmd, &cfg),
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging();
    let g = cli.global;
    let overrides = Overrides {
        config: g.config,
        seed: g.seed,
        threads: g.threads,
        precision: g.precision,
        out: g.out,
        set: g.set,
    };
    match execute(cli.command, &overrides) {
        Ok(summary) => {
            println!("{}: {summary}", cli.command.name());
            0
        }
        Err(e) => {
            error!("{}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
