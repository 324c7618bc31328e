use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use ere_lab::{run, Command, Exit, RunConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Sub {
    Validate,
    Solve,
    Verify,
    Example1,
    ExportTriangle,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Validate => Command::Validate,
            Sub::Solve => Command::Solve,
            Sub::Verify => Command::Verify,
            Sub::Example1 => Command::Example1,
            Sub::ExportTriangle => Command::ExportTriangle,
        }
    }
}

/// Equilibrium Riccati solver and Monte Carlo verifier for time-inconsistent
/// forward-backward LQ problems.
#[derive(Debug, Parser)]
#[command(name = "ere-lab", version)]
struct Args {
    #[arg(value_enum)]
    command: Sub,
    /// Problem file, or `builtin:<name>`.
    #[arg(long, default_value = "builtin:example1")]
    input: String,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Number of grid steps, overriding the instance.
    #[arg(long)]
    grid: Option<usize>,
    /// Fixed-point tolerance.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Picard iteration cap per window.
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Monte Carlo paths.
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    /// Monte Carlo seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Solve even if blocking assumption checks fail.
    #[arg(long)]
    override_assumptions: bool,
    /// Mollify the weights with this bump width.
    #[arg(long)]
    mollify: Option<f64>,
    /// Use antithetic Brownian pairs.
    #[arg(long)]
    antithetic: bool,
    /// Largest triangle export, in rows.
    #[arg(long, default_value_t = 5_000_000)]
    export_cap: usize,
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("ERE_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("ERE_LAB_THREADS must be a non-negative integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { Exit::Usage.code() } else { 0 });
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(Exit::Usage.code());
    }
    let cfg = RunConfig {
        grid: args.grid,
        tol: args.tol,
        max_iters: args.max_iters,
        paths: args.paths,
        seed: args.seed,
        override_assumptions: args.override_assumptions,
        mollify: args.mollify,
        antithetic: args.antithetic,
        export_cap: args.export_cap,
        ..RunConfig::new(args.command.into(), args.input, args.out)
    };
    match run(&cfg) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.exit.code())
        }
    }
}
