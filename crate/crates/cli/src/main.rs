use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mesogas::{execute, Command, ConfigError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "mesogas", version, about = "Mesoscopic Coulomb gas experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the invariant checks and report residuals.
    Verify(Args),
    /// Run Gibbs chains at every regime grid point.
    Sample(Args),
    /// Solve the equilibrium and thermal equilibrium measures.
    Equilibrium(Args),
    /// Evaluate the rate functionals at the target measure.
    Rate(Args),
    /// Place and certify a separated point configuration.
    Construct(Args),
    /// Estimate ball probabilities across the regime grid.
    Sweep(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory of the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match cli.command {
        Cmd::Verify(a) => (Command::Verify, a),
        Cmd::Sample(a) => (Command::Sample, a),
        Cmd::Equilibrium(a) => (Command::Equilibrium, a),
        Cmd::Rate(a) => (Command::Rate, a),
        Cmd::Construct(a) => (Command::Construct, a),
        Cmd::Sweep(a) => (Command::Sweep, a),
    };
    let mut config = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(o) = args.out {
        config.outputs.dir = o;
    }
    match config.validate() {
        Ok(warnings) => warnings.iter().for_each(|w| eprintln!("warning: {w}")),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let out = config.outputs.dir.clone();
    match execute(cmd, &config, &out) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("invariant failure; see {}", out.display());
            ExitCode::from(1)
        }
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
