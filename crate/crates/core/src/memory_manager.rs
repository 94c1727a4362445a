//! Group-level offload simulation.
//!
//! A group idle for `s_idle` steps is written out to backing storage unless the
//! activity predictor ranks it among the top `L`; offloaded groups the
//! predictor ranks highly are restored ahead of use. Each call to
//! [`MemoryLedger::tick`] runs, in order:
//!
//! 1. activations: an offloaded group is loaded synchronously (miss); a
//!    resident group that was kept or restored on prediction scores a hit;
//! 2. idle counters and EMA activity scores are updated;
//! 3. resident groups that were not activated and have been idle for at least
//!    `s_idle` steps become eviction candidates;
//! 4. the prediction set is the top `L` groups by score among candidates and
//!    offloaded groups, restricted to scores of at least `prefetch_min_score`;
//! 5. unpredicted candidates are offloaded and predicted offloaded groups are
//!    prefetched.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compression::{ArchiveDims, CompressedArchive, GroupSection, ResidualPrecision};
use crate::error::{MoeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub s_idle: u64,
    /// Predictor EMA rate η.
    pub ema_rate: f64,
    pub lookahead_l: usize,
    /// Offloaded groups scoring below this are never prefetched.
    pub prefetch_min_score: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { s_idle: 10, ema_rate: 0.1, lookahead_l: 2, prefetch_min_score: 0.05 }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return Err(MoeError::invalid(format!("EMA rate {} outside (0, 1]", self.ema_rate)));
        }
        if !(self.prefetch_min_score >= 0.0) {
            return Err(MoeError::invalid("prefetch minimum score must be ≥ 0"));
        }
        Ok(())
    }
}

/// Groups moved by one tick.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickEvents {
    pub loaded: Vec<usize>,
    pub offloaded: Vec<usize>,
    pub prefetched: Vec<usize>,
    pub hits: Vec<usize>,
    pub misses: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryLedger {
    resident: Vec<bool>,
    predicted: Vec<bool>,
    pub idle_steps: Vec<u64>,
    pub activity_score: Vec<f64>,
    pub bytes_of_group: Vec<u64>,
    pub peak_resident_bytes: u64,
    pub prefetch_hits: u64,
    pub prefetch_misses: u64,
    pub prefetches: u64,
    pub offloads: u64,
    pub steps: u64,
}

impl MemoryLedger {
    /// All groups start resident.
    pub fn new(bytes_of_group: Vec<u64>) -> Self {
        let g = bytes_of_group.len();
        let peak = bytes_of_group.iter().sum();
        Self {
            resident: vec![true; g],
            predicted: vec![false; g],
            idle_steps: vec![0; g],
            activity_score: vec![0.0; g],
            bytes_of_group,
            peak_resident_bytes: peak,
            prefetch_hits: 0,
            prefetch_misses: 0,
            prefetches: 0,
            offloads: 0,
            steps: 0,
        }
    }

    /// Sizes taken from each group's encoded archive section.
    pub fn from_archive(archive: &CompressedArchive) -> Self {
        Self::new(archive.sections.iter().map(|s| s.encoded_len() as u64).collect())
    }

    pub fn num_groups(&self) -> usize {
        self.resident.len()
    }

    pub fn is_resident(&self, g: usize) -> bool {
        self.resident[g]
    }

    pub fn resident(&self) -> Vec<usize> {
        (0..self.num_groups()).filter(|&g| self.resident[g]).collect()
    }

    pub fn offloaded(&self) -> Vec<usize> {
        (0..self.num_groups()).filter(|&g| !self.resident[g]).collect()
    }

    pub fn resident_bytes(&self) -> u64 {
        (0..self.num_groups()).filter(|&g| self.resident[g]).map(|g| self.bytes_of_group[g]).sum()
    }

    pub fn offloaded_bytes(&self) -> u64 {
        (0..self.num_groups()).filter(|&g| !self.resident[g]).map(|g| self.bytes_of_group[g]).sum()
    }

    pub fn peak_memory(&self) -> u64 {
        self.peak_resident_bytes
    }

    /// `hits / (hits + misses)`, or `None` before any were recorded.
    pub fn hit_rate(&self) -> Option<f64> {
        let total = self.prefetch_hits + self.prefetch_misses;
        (total > 0).then(|| self.prefetch_hits as f64 / total as f64)
    }

    fn note_peak(&mut self) {
        self.peak_resident_bytes = self.peak_resident_bytes.max(self.resident_bytes());
    }

    pub fn tick(&mut self, activated: &[usize], cfg: &MemoryConfig) -> Result<TickEvents> {
        let g = self.num_groups();
        if let Some(&bad) = activated.iter().find(|&&a| a >= g) {
            return Err(MoeError::invalid(format!("activated group {bad} out of range")));
        }
        let mut active = vec![false; g];
        for &a in activated {
            active[a] = true;
        }
        let mut ev = TickEvents::default();

        for gi in (0..g).filter(|&gi| active[gi]) {
            if !self.resident[gi] {
                self.resident[gi] = true;
                self.prefetch_misses += 1;
                ev.loaded.push(gi);
                ev.misses.push(gi);
            } else if self.predicted[gi] {
                self.prefetch_hits += 1;
                ev.hits.push(gi);
            }
        }
        self.predicted.iter_mut().for_each(|p| *p = false);
        self.note_peak();

        let eta = cfg.ema_rate;
        for gi in 0..g {
            if active[gi] {
                self.idle_steps[gi] = 0;
            } else {
                self.idle_steps[gi] += 1;
            }
            let hit = if active[gi] { 1.0 } else { 0.0 };
            self.activity_score[gi] = (1.0 - eta) * self.activity_score[gi] + eta * hit;
        }

        let candidate: Vec<bool> =
            (0..g).map(|gi| self.resident[gi] && !active[gi] && self.idle_steps[gi] >= cfg.s_idle).collect();
        let mut pool: Vec<usize> = (0..g)
            .filter(|&gi| (candidate[gi] || !self.resident[gi]) && self.activity_score[gi] >= cfg.prefetch_min_score)
            .collect();
        pool.sort_by(|&a, &b| self.activity_score[b].total_cmp(&self.activity_score[a]).then(a.cmp(&b)));
        pool.truncate(cfg.lookahead_l);
        let mut chosen = vec![false; g];
        for &gi in &pool {
            chosen[gi] = true;
        }

        for gi in 0..g {
            if candidate[gi] && !chosen[gi] {
                self.resident[gi] = false;
                self.offloads += 1;
                ev.offloaded.push(gi);
            }
        }
        for gi in 0..g {
            if !chosen[gi] {
                continue;
            }
            if !self.resident[gi] {
                self.resident[gi] = true;
                self.prefetches += 1;
                ev.prefetched.push(gi);
            }
            self.predicted[gi] = true;
        }
        self.note_peak();
        self.steps += 1;
        Ok(ev)
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            steps: self.steps,
            resident: self.resident(),
            offloaded: self.offloaded(),
            resident_bytes: self.resident_bytes(),
            total_bytes: self.bytes_of_group.iter().sum(),
            peak_resident_bytes: self.peak_resident_bytes,
            prefetch_hits: self.prefetch_hits,
            prefetch_misses: self.prefetch_misses,
            hit_rate: self.hit_rate(),
            prefetches: self.prefetches,
            offloads: self.offloads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub steps: u64,
    pub resident: Vec<usize>,
    pub offloaded: Vec<usize>,
    pub resident_bytes: u64,
    pub total_bytes: u64,
    pub peak_resident_bytes: u64,
    pub prefetch_hits: u64,
    pub prefetch_misses: u64,
    pub hit_rate: Option<f64>,
    pub prefetches: u64,
    pub offloads: u64,
}

/// A compressed archive on disk from which individual group sections are
/// read back on demand.
#[derive(Debug)]
pub struct ArchiveStore {
    path: PathBuf,
    dims: ArchiveDims,
    precision: ResidualPrecision,
    offsets: Vec<(u64, usize)>,
}

impl ArchiveStore {
    pub fn create(path: impl AsRef<Path>, archive: &CompressedArchive) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut w = BufWriter::new(File::create(&path)?);
        archive.write_to(&mut w)?;
        w.flush()?;
        let header = archive.to_bytes()?.len() - archive.sections.iter().map(GroupSection::encoded_len).sum::<usize>();
        let mut offsets = Vec::with_capacity(archive.sections.len());
        let mut at = header as u64;
        for s in &archive.sections {
            offsets.push((at, s.encoded_len()));
            at += s.encoded_len() as u64;
        }
        Ok(Self { path, dims: archive.dims, precision: archive.precision, offsets })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read_section(&self, g: usize) -> Result<GroupSection> {
        let &(offset, len) = self
            .offsets
            .get(g)
            .ok_or_else(|| MoeError::invalid(format!("group {g} not in store")))?;
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0u8; len];
        f.read_exact(&mut buf)?;
        GroupSection::read_from(&mut buf.as_slice(), self.dims, self.precision)
    }
}

/// Ledger plus in-memory group sections backed by an [`ArchiveStore`].
#[derive(Debug)]
pub struct OffloadSimulator {
    pub ledger: MemoryLedger,
    pub cfg: MemoryConfig,
    store: ArchiveStore,
    sections: Vec<Option<GroupSection>>,
    pub bytes_read: u64,
}

impl OffloadSimulator {
    pub fn new(archive: &CompressedArchive, store_path: impl AsRef<Path>, cfg: MemoryConfig) -> Result<Self> {
        cfg.validate()?;
        let store = ArchiveStore::create(store_path, archive)?;
        Ok(Self {
            ledger: MemoryLedger::from_archive(archive),
            cfg,
            store,
            sections: archive.sections.iter().cloned().map(Some).collect(),
            bytes_read: 0,
        })
    }

    pub fn tick(&mut self, activated: &[usize]) -> Result<TickEvents> {
        let ev = self.ledger.tick(activated, &self.cfg)?;
        for &g in &ev.offloaded {
            self.sections[g] = None;
        }
        for &g in ev.loaded.iter().chain(&ev.prefetched) {
            let s = self.store.read_section(g)?;
            self.bytes_read += s.encoded_len() as u64;
            self.sections[g] = Some(s);
        }
        Ok(ev)
    }

    /// Resident section of group `g`, if loaded.
    pub fn section(&self, g: usize) -> Option<&GroupSection> {
        self.sections[g].as_ref()
    }
}
