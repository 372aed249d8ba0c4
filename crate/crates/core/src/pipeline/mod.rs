//! Inference paths over retrieved documents.
//!
//! * Vanilla: documents and query are concatenated and prefilled from
//!   position 0, so every document attends to the ones before it.
//! * MatKV: each document's cache is loaded from the store (prefilled at
//!   position 0 on its own), the caches are concatenated, and only the query
//!   is prefilled on top before decoding.
//! * MatKV with overlap: the MatKV path split into a load stage and a
//!   compute stage that run concurrently across batches.

mod schedule;

pub use schedule::{execute, predict_makespan, Execution, Schedule, SimClock, SimulatedTimes, StageSpan};

use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kvstore::{ChunkId, KvStore, StoreError};
use crate::model::{KvCache, Model, ModelError};
use crate::policy::{AccessDecision, AccessStats, AdmissionPolicy, EvictionPolicy, PolicyError};
use crate::retrieval::{self, IngestError, RetrievalError, RetrievalResult, VectorIndex};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("batch {batch}: {source}")]
    Batch { batch: usize, source: Box<PipelineError> },
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Where the query's rotary positions start when document caches were each
/// prefilled from position 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositioningRule {
    /// Sum of retrieved chunk lengths (same query positions as Vanilla).
    #[default]
    AfterSum,
    /// Longest retrieved chunk.
    AfterMax,
}

impl PositioningRule {
    pub fn query_base(self, doc_lens: &[usize]) -> usize {
        match self {
            PositioningRule::AfterSum => doc_lens.iter().sum(),
            PositioningRule::AfterMax => doc_lens.iter().copied().max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "matkv")]
    MatKv,
    #[serde(rename = "matkv-overlap")]
    MatKvOverlap,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Vanilla, Mode::MatKv, Mode::MatKvOverlap];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::MatKv => "matkv",
            Mode::MatKvOverlap => "matkv-overlap",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected vanilla, matkv or matkv-overlap)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub query_tokens: Vec<u32>,
    #[serde(default)]
    pub retrieved_ids: Vec<ChunkId>,
    pub max_new_tokens: usize,
}

impl Request {
    pub fn validate(&self) -> Result<()> {
        if self.query_tokens.is_empty() {
            return Err(PipelineError::InvalidRequest("query must not be empty".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(PipelineError::InvalidRequest("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Wall time spent in each inference phase, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub load_s: f64,
    pub prefill_s: f64,
    pub decode_s: f64,
}

impl LatencyBreakdown {
    pub fn total_s(&self) -> f64 {
        self.load_s + self.prefill_s + self.decode_s
    }
}

impl Add for LatencyBreakdown {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { load_s: self.load_s + o.load_s, prefill_s: self.prefill_s + o.prefill_s, decode_s: self.decode_s + o.decode_s }
    }
}

impl AddAssign for LatencyBreakdown {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    pub generated: Vec<u32>,
    pub breakdown: LatencyBreakdown,
    pub mode: Mode,
}

fn secs(since: Instant) -> f64 {
    since.elapsed().as_secs_f64()
}

fn doc_tokens(index: &VectorIndex, request: &Request) -> Result<Vec<Vec<u32>>> {
    request.retrieved_ids.iter().map(|id| Ok(index.tokens(id)?)).collect()
}

/// Full prefill of `docs ‖ query` from position 0, then greedy decoding.
pub fn vanilla_with_docs(model: &Model, docs: &[Vec<u32>], request: &Request) -> Result<InferenceOutput> {
    request.validate()?;
    let mut prompt: Vec<u32> = docs.concat();
    prompt.extend_from_slice(&request.query_tokens);
    let t = Instant::now();
    let (cache, logits) = model.prefill(&prompt, 0)?;
    let prefill_s = secs(t);
    let t = Instant::now();
    let generated = model.generate_greedy(cache, &logits, prompt.len(), request.max_new_tokens)?;
    let decode_s = secs(t);
    Ok(InferenceOutput { generated, breakdown: LatencyBreakdown { load_s: 0.0, prefill_s, decode_s }, mode: Mode::Vanilla })
}

pub fn run_vanilla(model: &Model, index: &VectorIndex, request: &Request) -> Result<InferenceOutput> {
    let docs = doc_tokens(index, request)?;
    vanilla_with_docs(model, &docs, request)
}

/// Mutable caching state consulted when a retrieved chunk is cold.
#[derive(Debug, Clone, Default)]
pub struct CacheController {
    pub admission: AdmissionPolicy,
    pub eviction: EvictionPolicy,
    pub stats: AccessStats,
    /// Logical time, advanced by `access_interval_s` per request.
    pub now_s: f64,
    pub access_interval_s: f64,
}

impl CacheController {
    pub fn new(admission: AdmissionPolicy, eviction: EvictionPolicy) -> Result<Self> {
        admission.validate()?;
        eviction.validate()?;
        Ok(Self { admission, eviction, stats: AccessStats::new(), now_s: 0.0, access_interval_s: 1.0 })
    }
}

/// Document caches for one request, ready for the compute stage.
#[derive(Debug, Clone)]
pub struct PreparedRequest {
    pub caches: Vec<KvCache>,
    pub breakdown: LatencyBreakdown,
}

/// Load stage: fetch every retrieved chunk's cache, recomputing cold ones.
///
/// Warm chunks are read with `load_many` (time goes to `load_s`). Cold
/// chunks, whether never materialized or evicted, are prefilled at position
/// 0 (time goes to `prefill_s`) and stored if the admission policy says so.
/// Afterwards the eviction policy may trim the store.
pub fn prepare_matkv(
    model: &Model,
    store: &KvStore,
    index: &VectorIndex,
    controller: &mut CacheController,
    request: &Request,
    parallelism: usize,
) -> Result<PreparedRequest> {
    request.validate()?;
    let ids = &request.retrieved_ids;
    for id in ids {
        if index.get(id).is_none() {
            return Err(RetrievalError::UnknownChunk(id.clone()).into());
        }
    }
    let mut breakdown = LatencyBreakdown::default();
    let mut slots: Vec<Option<KvCache>> = vec![None; ids.len()];

    let warm: Vec<usize> = (0..ids.len()).filter(|&i| index.is_materialized(&ids[i])).collect();
    let t = Instant::now();
    let warm_ids: Vec<ChunkId> = warm.iter().map(|&i| ids[i].clone()).collect();
    match store.load_many(&warm_ids, parallelism) {
        Ok(batch) => {
            for (&i, c) in warm.iter().zip(batch.caches) {
                slots[i] = Some(c);
            }
        }
        Err(StoreError::LoadMany(failures)) if failures.iter().all(|(_, e)| e.is_not_found()) => {
            // index thought these were warm; load the survivors one by one
            for &i in &warm {
                match store.load_kv(&ids[i]) {
                    Ok(c) => slots[i] = Some(c),
                    Err(e) if e.is_not_found() => {
                        index.set_materialized(&ids[i], false);
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Err(e) => return Err(e.into()),
    }
    breakdown.load_s = secs(t);

    controller.now_s += controller.access_interval_s;
    let now = controller.now_s;
    for (i, id) in ids.iter().enumerate() {
        let decision = controller.admission.on_access(&mut controller.stats, id, now)?;
        if slots[i].is_some() {
            continue;
        }
        let t = Instant::now();
        let tokens = index.tokens(id)?;
        let (cache, _) = model.prefill(&tokens, 0)?;
        if decision == AccessDecision::Materialize {
            store.store_kv(id, &cache)?;
            index.set_materialized(id, true);
        }
        breakdown.prefill_s += secs(t);
        slots[i] = Some(cache);
    }

    for id in controller.eviction.maybe_evict(&controller.stats, store)? {
        index.set_materialized(&id, false);
    }

    Ok(PreparedRequest { caches: slots.into_iter().map(|c| c.expect("every slot filled")).collect(), breakdown })
}

/// Compute stage: concatenate the document caches, prefill the query on
/// top at the position chosen by `positioning`, then decode greedily.
pub fn complete_matkv(
    model: &Model,
    prepared: PreparedRequest,
    request: &Request,
    positioning: PositioningRule,
    mode: Mode,
) -> Result<InferenceOutput> {
    request.validate()?;
    let mut breakdown = prepared.breakdown;
    let lens: Vec<usize> = prepared.caches.iter().map(KvCache::n_tokens).collect();
    let base = positioning.query_base(&lens);

    let t = Instant::now();
    let past = model.concat_caches(&prepared.caches)?;
    let (cache, logits) = model.extend(&past, &request.query_tokens, base)?;
    breakdown.prefill_s += secs(t);

    let t = Instant::now();
    let generated = model.generate_greedy(cache, &logits, base + request.query_tokens.len(), request.max_new_tokens)?;
    breakdown.decode_s += secs(t);
    Ok(InferenceOutput { generated, breakdown, mode })
}

pub fn run_matkv(
    model: &Model,
    store: &KvStore,
    index: &VectorIndex,
    controller: &mut CacheController,
    request: &Request,
    positioning: PositioningRule,
    parallelism: usize,
) -> Result<InferenceOutput> {
    let prepared = prepare_matkv(model, store, index, controller, request, parallelism)?;
    complete_matkv(model, prepared, request, positioning, Mode::MatKv)
}

pub type Batch = Vec<Request>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub batch: usize,
    pub breakdown: LatencyBreakdown,
    pub span: StageSpan,
    pub generated: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub mode: Mode,
    pub batches: Vec<BatchResult>,
    pub makespan_s: f64,
}

impl BatchReport {
    pub fn breakdown(&self) -> LatencyBreakdown {
        self.batches.iter().fold(LatencyBreakdown::default(), |acc, b| acc + b.breakdown)
    }

    pub fn generated(&self) -> Vec<Vec<u32>> {
        self.batches.iter().flat_map(|b| b.generated.iter().cloned()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineOptions {
    pub positioning: PositioningRule,
    pub load_parallelism: usize,
    pub handoff_depth: Option<usize>,
    pub access_interval_s: f64,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self { positioning: PositioningRule::AfterSum, load_parallelism: 4, handoff_depth: None, access_interval_s: 1.0 }
    }
}

/// Model, store, index, and caching policy wired together.
#[derive(Debug)]
pub struct Engine {
    model: Arc<Model>,
    store: KvStore,
    index: VectorIndex,
    controller: Mutex<CacheController>,
    options: EngineOptions,
}

enum Staged {
    Vanilla(Vec<Vec<Vec<u32>>>),
    MatKv(Vec<PreparedRequest>),
}

impl Engine {
    pub fn new(
        model: Arc<Model>,
        store: KvStore,
        index: VectorIndex,
        admission: AdmissionPolicy,
        eviction: EvictionPolicy,
        options: EngineOptions,
    ) -> Result<Self> {
        if store.config_hash() != model.config_hash() {
            return Err(StoreError::Incompatible { expected: model.config_hash(), found: store.config_hash() }.into());
        }
        let mut controller = CacheController::new(admission, eviction)?;
        controller.access_interval_s = options.access_interval_s;
        Ok(Self { model, store, index, controller: Mutex::new(controller), options })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn store(&self) -> &KvStore {
        &self.store
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn options(&self) -> &EngineOptions {
        &self.options
    }

    pub fn admission(&self) -> AdmissionPolicy {
        self.controller.lock().unwrap().admission
    }

    pub fn access_stats(&self) -> AccessStats {
        self.controller.lock().unwrap().stats.clone()
    }

    pub fn ingest(&self, doc_id: &str, tokens: &[u32]) -> std::result::Result<Vec<ChunkId>, IngestError> {
        let admission = self.admission();
        let ids = retrieval::ingest(&self.index, &self.store, &self.model, &admission, doc_id, tokens)?;
        let c = self.controller.lock().unwrap();
        if let Ok(evicted) = c.eviction.maybe_evict(&c.stats, &self.store) {
            for id in evicted {
                self.index.set_materialized(&id, false);
            }
        }
        Ok(ids)
    }

    pub fn search(&self, query_tokens: &[u32], k: usize) -> Result<RetrievalResult> {
        Ok(self.index.search(query_tokens, k)?)
    }

    pub fn remove(&self, id: &ChunkId) -> Result<bool> {
        let removed = retrieval::remove(&self.index, &self.store, id)?;
        if removed {
            self.controller.lock().unwrap().stats.forget(id);
        }
        Ok(removed)
    }

    /// Request for `query_tokens` with the top-`k` chunks as context.
    pub fn request_for(&self, query_tokens: &[u32], k: usize, max_new_tokens: usize) -> Result<Request> {
        let hits = self.search(query_tokens, k)?;
        Ok(Request { query_tokens: query_tokens.to_vec(), retrieved_ids: hits.ids, max_new_tokens })
    }

    pub fn run_vanilla(&self, request: &Request) -> Result<InferenceOutput> {
        run_vanilla(&self.model, &self.index, request)
    }

    pub fn run_matkv(&self, request: &Request) -> Result<InferenceOutput> {
        let prepared = self.prepare(request)?;
        complete_matkv(&self.model, prepared, request, self.options.positioning, Mode::MatKv)
    }

    pub fn run(&self, mode: Mode, request: &Request) -> Result<InferenceOutput> {
        match mode {
            Mode::Vanilla => self.run_vanilla(request),
            Mode::MatKv | Mode::MatKvOverlap => {
                let prepared = self.prepare(request)?;
                complete_matkv(&self.model, prepared, request, self.options.positioning, mode)
            }
        }
    }

    fn prepare(&self, request: &Request) -> Result<PreparedRequest> {
        let mut c = self.controller.lock().unwrap();
        prepare_matkv(&self.model, &self.store, &self.index, &mut c, request, self.options.load_parallelism)
    }

    /// Runs batches in `mode`. Vanilla and MatKV are serialized; the overlap
    /// mode loads batch i+1 while batch i computes. With `sim`, stage times
    /// are replaced by the configured durations.
    pub fn run_batches(&self, mode: Mode, batches: &[Batch], sim: Option<&SimulatedTimes>) -> Result<BatchReport> {
        if batches.is_empty() {
            return Err(PipelineError::InvalidRequest("no batches to run".into()));
        }
        if let Some(s) = sim {
            s.validate(batches.len()).map_err(PipelineError::InvalidRequest)?;
        }
        let schedule = match mode {
            Mode::MatKvOverlap => Schedule::Overlapped { handoff_depth: self.options.handoff_depth },
            _ => Schedule::Serialized,
        };
        let wrap = |batch: usize| move |e: PipelineError| PipelineError::Batch { batch, source: Box::new(e) };

        let stage_a = |i: usize| -> Result<Staged> {
            match mode {
                Mode::Vanilla => batches[i]
                    .iter()
                    .map(|r| doc_tokens(&self.index, r))
                    .collect::<Result<_>>()
                    .map(Staged::Vanilla)
                    .map_err(wrap(i)),
                _ => batches[i].iter().map(|r| self.prepare(r)).collect::<Result<_>>().map(Staged::MatKv).map_err(wrap(i)),
            }
        };
        let stage_b = |i: usize, staged: Staged| -> Result<Vec<InferenceOutput>> {
            let out: Result<Vec<_>> = match staged {
                Staged::Vanilla(docs) => {
                    batches[i].iter().zip(docs).map(|(r, d)| vanilla_with_docs(&self.model, &d, r)).collect()
                }
                Staged::MatKv(prepared) => batches[i]
                    .iter()
                    .zip(prepared)
                    .map(|(r, p)| complete_matkv(&self.model, p, r, self.options.positioning, mode))
                    .collect(),
            };
            out.map_err(wrap(i))
        };

        let exec = execute(batches.len(), schedule, sim, stage_a, stage_b)?;
        let batches = exec
            .results
            .into_iter()
            .zip(exec.spans)
            .enumerate()
            .map(|(batch, (outs, span))| BatchResult {
                batch,
                breakdown: outs.iter().fold(LatencyBreakdown::default(), |acc, o| acc + o.breakdown),
                span,
                generated: outs.into_iter().map(|o| o.generated).collect(),
            })
            .collect();
        Ok(BatchReport { mode, batches, makespan_s: exec.makespan_s })
    }
}
