use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hookscope_cli::alloc::CountingAlloc;
use hookscope_cli::bench::{worker, Variant};
use hookscope_cli::config::Command;
use hookscope_cli::{run, Failure, RunOptions};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(name = "hookscope", version, about = "Hook-based interpretability methods over small models")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args)]
struct JobArgs {
    /// TOML job file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; takes precedence over HOOKSCOPE_OUT and the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Sub {
    /// Attribute model outputs to inputs.
    Attribute(JobArgs),
    /// Fit linear probes on cached activations.
    Probe(JobArgs),
    /// Compare activation, gradient and relevance patching.
    Patch(JobArgs),
    /// Optimise an input to excite one unit.
    Maximise(JobArgs),
    /// Mask the least relevant weights or units.
    Prune(JobArgs),
    /// Run the benchmark matrix.
    Bench(JobArgs),
    #[command(hide = true)]
    BenchWorker(Variant),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (command, args) = match cli.command {
        Sub::Attribute(a) => (Command::Attribute, a),
        Sub::Probe(a) => (Command::Probe, a),
        Sub::Patch(a) => (Command::Patch, a),
        Sub::Maximise(a) => (Command::Maximise, a),
        Sub::Prune(a) => (Command::Prune, a),
        Sub::Bench(a) => (Command::Bench, a),
        Sub::BenchWorker(v) => return finish(worker(&v).map(|_| ())),
    };
    let opts = RunOptions { seed: args.seed, out: args.out };
    let exe = match std::env::current_exe() {
        Ok(p) => p,
        Err(e) => return finish(Err(Failure::runtime(format!("cannot locate executable: {e}")))),
    };
    finish(run(command, &args.config, &opts, &exe).map(|files| {
        for f in files {
            println!("{}", f.display());
        }
    }))
}

fn finish(result: Result<(), Failure>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
