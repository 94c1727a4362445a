use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use moeforge::compression::CompressedArchive;
use moeforge::memory_manager::{LedgerSummary, MemoryConfig, OffloadSimulator};
use moeforge::rng::seeded;
use moeforge::routing::ZipfStream;

use crate::error::{CliError, CliResult};
use crate::files::{effective_seed, read_jsonl, write_json, Envelope};
use crate::MemSimArgs;

#[derive(Debug, Serialize)]
struct MemSimConfig<'a> {
    archive: &'a Path,
    trace: Option<&'a Path>,
    steps: usize,
    active_per_step: usize,
    zipf: f64,
    memory: MemoryConfig,
}

#[derive(Debug, Serialize)]
struct MemSimBody {
    summary: LedgerSummary,
    bytes_read_from_store: u64,
    loads: usize,
}

/// Zipf-ranked groups, `per_step` draws per step (duplicates collapse).
fn zipf_trace(groups: usize, steps: usize, per_step: usize, exponent: f64, seed: u64) -> CliResult<Vec<Vec<usize>>> {
    let stream = ZipfStream::new(groups, 1, exponent, seed)?;
    let mut rng = seeded(seed);
    Ok((0..steps)
        .map(|_| {
            let mut ids = stream.sample_ids(per_step, &mut rng);
            ids.sort_unstable();
            ids.dedup();
            ids
        })
        .collect())
}

pub fn cmd_mem_sim(a: &MemSimArgs) -> CliResult<()> {
    let started = Instant::now();
    let seed = effective_seed(a.seed)?;
    let archive = CompressedArchive::load(&a.archive)
        .map_err(|e| CliError::usage(format!("cannot load archive {}: {e}", a.archive.display())))?;
    let cfg = MemoryConfig {
        s_idle: a.s_idle,
        ema_rate: a.ema_rate,
        lookahead_l: a.lookahead,
        prefetch_min_score: a.min_score,
    };
    let trace = match &a.trace {
        Some(p) => read_jsonl::<Vec<usize>>(p)?,
        None => zipf_trace(archive.num_groups(), a.steps, a.active_per_step, a.zipf, seed)?,
    };
    let store: PathBuf = a.store.clone().unwrap_or_else(|| a.out.with_extension("store.moec"));
    let mut sim = OffloadSimulator::new(&archive, &store, cfg)?;
    let mut loads = 0;
    for active in &trace {
        loads += sim.tick(active)?.loaded.len();
    }
    let body = MemSimBody { summary: sim.ledger.summary(), bytes_read_from_store: sim.bytes_read, loads };
    let config = MemSimConfig {
        archive: &a.archive,
        trace: a.trace.as_deref(),
        steps: trace.len(),
        active_per_step: a.active_per_step,
        zipf: a.zipf,
        memory: cfg,
    };
    write_json(&a.out, &Envelope::new("mem-sim", seed, config, body, started))
}
