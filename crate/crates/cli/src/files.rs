//! Input and output helpers shared by the commands.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use moeforge::clustering::GroupAssignment;
use moeforge::expert_bank::ExpertBank;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "MOEFORGE_SEED";

/// Every report carries the command, its effective seed and configuration.
/// Only `wall_clock_seconds` varies between identical invocations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<C, B> {
    pub command: String,
    pub seed: u64,
    pub config: C,
    #[serde(flatten)]
    pub body: B,
    pub wall_clock_seconds: f64,
}

impl<C: Serialize, B: Serialize> Envelope<C, B> {
    pub fn new(command: &str, seed: u64, config: C, body: B, started: Instant) -> Self {
        Self { command: command.into(), seed, config, body, wall_clock_seconds: started.elapsed().as_secs_f64() }
    }
}

/// `MOEFORGE_SEED` when set, otherwise `fallback`.
pub fn effective_seed(fallback: u64) -> CliResult<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(fallback),
        Err(e) => Err(CliError::usage(format!("{SEED_ENV}: {e}"))),
    }
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// One JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let file = File::open(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|e| CliError::usage(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(value);
    }
    Ok(out)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> CliResult<()> {
    let mut w = create(path)?;
    for v in values {
        serde_json::to_writer(&mut w, v)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the report to `out`, or prints it when no path is given.
pub fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> CliResult<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

pub fn load_bank(path: &Path) -> CliResult<ExpertBank> {
    ExpertBank::load(path).map_err(|e| CliError::usage(format!("cannot load bank {}: {e}", path.display())))
}

#[derive(Deserialize)]
struct AssignmentHolder {
    assignment: GroupAssignment,
}

/// Reads a grouping from a bare assignment object or from a report that has
/// an `assignment` field.
pub fn load_assignment(path: &Path) -> CliResult<GroupAssignment> {
    let text = read_text(path)?;
    serde_json::from_str::<AssignmentHolder>(&text)
        .map(|h| h.assignment)
        .or_else(|_| serde_json::from_str::<GroupAssignment>(&text))
        .map_err(|e| CliError::usage(format!("{}: not a group assignment: {e}", path.display())))
}
