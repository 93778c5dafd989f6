use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use curvmeas::{run, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "curvmeas", version, about = "Prescribed curvature measure solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Node counts per angle, e.g. 32x64.
    #[arg(long, global = true)]
    resolution: Option<String>,
    /// Extra `key=value` override; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Solve for the radius by continuation from the round sphere.
    Solve,
    /// Compute f from a given surface.
    Forward,
    /// Curvature measures and parallel-set volumes of a given surface.
    Measure,
    /// Randomized property suites for the σ_k inequalities and geometry.
    Verify,
    /// Convexity of the potential built from f, and of a surface if given.
    CheckConvexity,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Forward => "forward",
            Command::Measure => "measure",
            Command::Verify => "verify",
            Command::CheckConvexity => "check-convexity",
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut overrides = Vec::new();
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(r) = &cli.resolution {
        overrides.push(("resolution".into(), r.clone()));
    }
    RunConfig::resolve(cli.command.name(), cli.config.as_deref(), &overrides, cli.out.clone())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match resolve(&cli).and_then(|cfg| run(&cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
