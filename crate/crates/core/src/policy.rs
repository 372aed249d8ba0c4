//! Admission and eviction policies deciding which chunks keep a
//! materialized KV cache on disk.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kvstore::{ChunkId, KvStore, StoreError};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy: {0}")]
    Invalid(String),
    #[error("access time {now_s} precedes last recorded access at {last_s}")]
    TimeRegression { now_s: f64, last_s: f64 },
    #[error("evicting {id}: {source}")]
    Evict { id: ChunkId, source: StoreError },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionKind {
    EagerAll,
    LazyOnFirstAccess,
    BreakEvenThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissionPolicy {
    pub kind: AdmissionKind,
    /// Admit once the mean inter-access interval is at most this many
    /// seconds. Only read by `BreakEvenThreshold`.
    #[serde(default)]
    pub threshold_interval_s: f64,
}

impl Default for AdmissionPolicy {
    fn default() -> Self {
        Self::eager()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestDecision {
    MaterializeNow,
    Defer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessDecision {
    Materialize,
    Skip,
}

impl AdmissionPolicy {
    pub fn eager() -> Self {
        Self { kind: AdmissionKind::EagerAll, threshold_interval_s: 0.0 }
    }

    pub fn lazy() -> Self {
        Self { kind: AdmissionKind::LazyOnFirstAccess, threshold_interval_s: 0.0 }
    }

    pub fn break_even(threshold_interval_s: f64) -> Result<Self, PolicyError> {
        let p = Self { kind: AdmissionKind::BreakEvenThreshold, threshold_interval_s };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.kind == AdmissionKind::BreakEvenThreshold
            && !(self.threshold_interval_s.is_finite() && self.threshold_interval_s > 0.0)
        {
            return Err(PolicyError::Invalid("break-even threshold must be positive".into()));
        }
        Ok(())
    }

    pub fn on_ingest(&self, _id: &ChunkId) -> IngestDecision {
        match self.kind {
            AdmissionKind::EagerAll => IngestDecision::MaterializeNow,
            AdmissionKind::LazyOnFirstAccess | AdmissionKind::BreakEvenThreshold => IngestDecision::Defer,
        }
    }

    /// Records an access to `id` at `now_s` and decides whether a chunk
    /// that is currently cold should be materialized.
    pub fn on_access(&self, stats: &mut AccessStats, id: &ChunkId, now_s: f64) -> Result<AccessDecision, PolicyError> {
        let rec = stats.record(id, now_s)?;
        Ok(match self.kind {
            AdmissionKind::EagerAll | AdmissionKind::LazyOnFirstAccess => AccessDecision::Materialize,
            AdmissionKind::BreakEvenThreshold => {
                if rec.access_count < 2 {
                    AccessDecision::Skip
                } else {
                    let mean = (now_s - rec.first_access_s) / (rec.access_count - 1).max(1) as f64;
                    if mean <= self.threshold_interval_s {
                        AccessDecision::Materialize
                    } else {
                        AccessDecision::Skip
                    }
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub access_count: u64,
    pub first_access_s: f64,
    pub last_access_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessStats {
    records: BTreeMap<ChunkId, AccessRecord>,
    latest_s: Option<f64>,
}

impl AccessStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &ChunkId) -> Option<&AccessRecord> {
        self.records.get(id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Notes one access. Time may not run backwards across calls.
    pub fn record(&mut self, id: &ChunkId, now_s: f64) -> Result<AccessRecord, PolicyError> {
        if !now_s.is_finite() {
            return Err(PolicyError::Invalid(format!("access time {now_s} is not finite")));
        }
        if let Some(last_s) = self.latest_s {
            if now_s < last_s {
                return Err(PolicyError::TimeRegression { now_s, last_s });
            }
        }
        self.latest_s = Some(now_s);
        let rec = self
            .records
            .entry(id.clone())
            .and_modify(|r| {
                r.access_count += 1;
                r.last_access_s = now_s;
            })
            .or_insert(AccessRecord { access_count: 1, first_access_s: now_s, last_access_s: now_s });
        Ok(*rec)
    }

    pub fn forget(&mut self, id: &ChunkId) {
        self.records.remove(id);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionKind {
    None,
    Lru,
    Lfu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionPolicy {
    pub kind: EvictionKind,
    #[serde(default)]
    pub capacity_bytes: u64,
}

impl Default for EvictionPolicy {
    fn default() -> Self {
        Self { kind: EvictionKind::None, capacity_bytes: 0 }
    }
}

impl EvictionPolicy {
    pub fn lru(capacity_bytes: u64) -> Self {
        Self { kind: EvictionKind::Lru, capacity_bytes }
    }

    pub fn lfu(capacity_bytes: u64) -> Self {
        Self { kind: EvictionKind::Lfu, capacity_bytes }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.kind != EvictionKind::None && self.capacity_bytes == 0 {
            return Err(PolicyError::Invalid("eviction capacity must be positive".into()));
        }
        Ok(())
    }

    /// Picks the next victim among `candidates` (id, size). Chunks never
    /// accessed sort before every accessed chunk; ties go to the lower id.
    pub fn victim<'a>(&self, stats: &AccessStats, candidates: impl IntoIterator<Item = &'a ChunkId>) -> Option<ChunkId> {
        let key = |id: &ChunkId| -> f64 {
            match (self.kind, stats.get(id)) {
                (EvictionKind::Lfu, Some(r)) => r.access_count as f64,
                (EvictionKind::Lfu, None) => 0.0,
                (_, Some(r)) => r.last_access_s,
                (_, None) => f64::NEG_INFINITY,
            }
        };
        candidates
            .into_iter()
            .min_by(|a, b| key(a).total_cmp(&key(b)).then_with(|| a.cmp(b)))
            .cloned()
    }

    /// Deletes KV files until the store fits `capacity_bytes`. Returns the
    /// evicted ids in eviction order.
    pub fn maybe_evict(&self, stats: &AccessStats, store: &KvStore) -> Result<Vec<ChunkId>, PolicyError> {
        if self.kind == EvictionKind::None {
            return Ok(Vec::new());
        }
        let snapshot = store.stats()?;
        let mut sizes = snapshot.per_chunk;
        let mut bytes = snapshot.bytes;
        let mut evicted = Vec::new();
        while bytes > self.capacity_bytes {
            let Some(id) = self.victim(stats, sizes.keys()) else { break };
            store.delete_kv(&id).map_err(|source| PolicyError::Evict { id: id.clone(), source })?;
            bytes -= sizes.remove(&id).unwrap_or(0);
            evicted.push(id);
        }
        Ok(evicted)
    }
}
