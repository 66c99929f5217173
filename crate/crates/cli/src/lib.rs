//! Command-line front end for hookscope and its benchmark harness.
//!
//! `hookscope <command> --config <toml> [--seed N] [--out DIR]` runs one of
//! attribute, probe, patch, maximise, prune or bench. Exit codes are 0 on
//! success, 2 for configuration errors and 3 for failures inside a method.

use std::fmt;
use std::path::{Path, PathBuf};

pub mod alloc;
pub mod bench;
pub mod commands;
pub mod config;
pub mod report;

use config::{Command, JobConfig};

/// Environment variable that overrides the configured output directory.
pub const OUT_ENV: &str = "HOOKSCOPE_OUT";

#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn config(msg: impl fmt::Display) -> Self {
        Failure::Config(anyhow::anyhow!("{msg}"))
    }

    pub fn runtime(msg: impl fmt::Display) -> Self {
        Failure::Runtime(anyhow::anyhow!("{msg}"))
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Failure::Config(_))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "config error: {e:#}"),
            Failure::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<hookscope::Error> for Failure {
    fn from(e: hookscope::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn out_dir(cfg: &JobConfig, base: &Path, opts: &RunOptions) -> PathBuf {
    if let Some(o) = &opts.out {
        return o.clone();
    }
    if let Some(o) = std::env::var_os(OUT_ENV) {
        return PathBuf::from(o);
    }
    match &cfg.out {
        Some(o) if o.is_absolute() => o.clone(),
        Some(o) => base.join(o),
        None => PathBuf::from("out"),
    }
}

/// Loads `config`, checks it names `command`, runs it and returns the files
/// written. `exe` is the binary the bench harness spawns for its workers.
pub fn run(command: Command, config: &Path, opts: &RunOptions, exe: &Path) -> Result<Vec<PathBuf>, Failure> {
    let cfg = JobConfig::load(config)?;
    if cfg.command != command {
        return Err(Failure::config(format!("config is for {}, not {}", cfg.command, command)));
    }
    let base = config.parent().unwrap_or_else(|| Path::new("."));
    let out = out_dir(&cfg, base, opts);
    let seed = opts.seed.or(cfg.seed).unwrap_or(0);
    let dtype = cfg.dtype();
    let model = match (&cfg.model, command) {
        (_, Command::Bench) => None,
        (Some(p), _) => Some(commands::load_model(p, dtype)?),
        (None, _) => return Err(Failure::config("missing model path")),
    };
    std::fs::create_dir_all(&out).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", out.display())))?;
    match command {
        Command::Attribute => commands::attribute(model.unwrap(), cfg.attribute.as_ref().unwrap(), dtype, &out),
        Command::Probe => commands::probe(model.unwrap(), cfg.probe.as_ref().unwrap(), dtype, seed, &out),
        Command::Patch => commands::patch(model.unwrap(), cfg.patch.as_ref().unwrap(), dtype, &out),
        Command::Maximise => commands::maximise(model.unwrap(), cfg.maximise.as_ref().unwrap(), dtype, seed, &out),
        Command::Prune => commands::prune_cmd(model.unwrap(), cfg.prune.as_ref().unwrap(), dtype, seed, &out),
        Command::Bench => {
            let bench = cfg.bench.as_ref().unwrap();
            let path = out.join(&bench.csv);
            bench::run_bench(exe, bench, &path, |_| {})?;
            Ok(vec![path])
        }
    }
}
