//! Configuration-driven experiments over the mesoscopic Coulomb gas tools.

pub mod config;
pub mod experiments;
pub mod sweep;
pub mod verify;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

pub use config::{ConfigError, ExperimentConfig};
pub use sweep::{run_sweep, SweepRow, SweepSummary, COLUMNS};
pub use verify::{run_verify, VerifyReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Verify,
    Sample,
    Equilibrium,
    Rate,
    Construct,
    Sweep,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_trace(path: &Path, rows: &[experiments::TraceRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `cmd` and writes its outputs under `out`. Returns `false` when an
/// invariant check failed.
pub fn execute(cmd: Command, config: &ExperimentConfig, out: &Path) -> anyhow::Result<bool> {
    fs::create_dir_all(out)?;
    match cmd {
        Command::Verify => {
            let report = run_verify(config)?;
            write_json(&out.join("verify.json"), &report)?;
            Ok(report.passed)
        }
        Command::Sample => {
            let s = experiments::run_sample(config)?;
            write_trace(&out.join("sample_trace.csv"), &s.trace)?;
            write_json(&out.join("sample_summary.json"), &s)?;
            Ok(true)
        }
        Command::Equilibrium => {
            write_json(&out.join("equilibrium.json"), &experiments::run_equilibrium(config)?)?;
            Ok(true)
        }
        Command::Rate => {
            write_json(&out.join("rate.json"), &experiments::run_rate(config)?)?;
            Ok(true)
        }
        Command::Construct => {
            let c = experiments::run_construct(config)?;
            write_json(&out.join("construction.json"), &c)?;
            Ok(c.report.constraints_ok && c.certified != Some(false))
        }
        Command::Sweep => {
            let s = run_sweep(config)?;
            sweep::write_csv(&s.rows, BufWriter::new(File::create(out.join("sweep.csv"))?))?;
            write_json(&out.join("sweep_summary.json"), &s.summary)?;
            Ok(true)
        }
    }
}
