//! Brute-force cosine vector index over document chunks, with ingest that
//! materializes each chunk's KV cache and delete that cascades to the store.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::RwLock;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kvstore::{ChunkId, KvStore, StoreError};
use crate::model::{Fnv64, Model, ModelError};
use crate::policy::{AdmissionPolicy, IngestDecision};

pub const DEFAULT_EMBED_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token sequence must not be empty")]
    EmptyInput,
    #[error("unknown chunk {0}")]
    UnknownChunk(ChunkId),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

/// Ingest stopped part-way; `committed` chunks are indexed (and stored,
/// if the policy asked for it).
#[derive(Debug, Error)]
#[error("ingest of {doc_id} failed after {} committed chunk(s): {source}", committed.len())]
pub struct IngestError {
    pub doc_id: String,
    pub committed: Vec<ChunkId>,
    #[source]
    pub source: RetrievalError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub id: ChunkId,
    pub doc_id: String,
    pub tokens: Vec<u32>,
    #[serde(skip)]
    pub embedding: Vec<f32>,
    pub materialized: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ids: Vec<ChunkId>,
    pub scores: Vec<f64>,
}

/// Consecutive slices of `chunk_size` tokens; the last may be shorter.
pub fn chunk_document(tokens: &[u32], chunk_size: usize) -> Result<Vec<Vec<u32>>> {
    if chunk_size == 0 {
        return Err(RetrievalError::InvalidArgument("chunk_size must be at least 1".into()));
    }
    Ok(tokens.chunks(chunk_size).map(<[u32]>::to_vec).collect())
}

fn token_direction(token: u32, dim: usize) -> Vec<f64> {
    let mut h = Fnv64::new();
    h.write(b"matkv-embed");
    h.write(&token.to_le_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Bag-of-tokens embedding: the normalized sum of one seeded random unit
/// vector per token. Summation runs over distinct tokens in id order, so any
/// permutation of the same multiset yields the same bits.
pub fn embed(tokens: &[u32], dim: usize) -> Result<Vec<f32>> {
    if tokens.is_empty() {
        return Err(RetrievalError::EmptyInput);
    }
    if dim == 0 {
        return Err(RetrievalError::InvalidArgument("embedding dim must be positive".into()));
    }
    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let mut acc = vec![0.0f64; dim];
    for (token, n) in counts {
        for (a, d) in acc.iter_mut().zip(token_direction(token, dim)) {
            *a += f64::from(n) * d;
        }
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Opposing directions cancelled exactly; fall back to the first axis.
        let mut v = vec![0.0f32; dim];
        v[0] = 1.0;
        return Ok(v);
    }
    Ok(acc.into_iter().map(|x| (x / norm) as f32).collect())
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Chunk records keyed by id. Searches take a shared lock; ingest and
/// remove take the exclusive lock.
#[derive(Debug)]
pub struct VectorIndex {
    dim: usize,
    chunk_size: usize,
    records: RwLock<BTreeMap<ChunkId, ChunkRecord>>,
}

impl VectorIndex {
    pub fn new(dim: usize, chunk_size: usize) -> Result<Self> {
        if dim == 0 || chunk_size == 0 {
            return Err(RetrievalError::InvalidArgument("embedding dim and chunk_size must be positive".into()));
        }
        Ok(Self { dim, chunk_size, records: RwLock::new(BTreeMap::new()) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn len(&self) -> usize {
        self.records.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &ChunkId) -> Option<ChunkRecord> {
        self.records.read().unwrap().get(id).cloned()
    }

    pub fn tokens(&self, id: &ChunkId) -> Result<Vec<u32>> {
        self.records
            .read()
            .unwrap()
            .get(id)
            .map(|r| r.tokens.clone())
            .ok_or_else(|| RetrievalError::UnknownChunk(id.clone()))
    }

    pub fn is_materialized(&self, id: &ChunkId) -> bool {
        self.records.read().unwrap().get(id).is_some_and(|r| r.materialized)
    }

    pub fn set_materialized(&self, id: &ChunkId, materialized: bool) -> bool {
        match self.records.write().unwrap().get_mut(id) {
            Some(r) => {
                r.materialized = materialized;
                true
            }
            None => false,
        }
    }

    pub fn ids(&self) -> Vec<ChunkId> {
        self.records.read().unwrap().keys().cloned().collect()
    }

    pub fn records(&self) -> Vec<ChunkRecord> {
        self.records.read().unwrap().values().cloned().collect()
    }

    pub fn materialized_count(&self) -> usize {
        self.records.read().unwrap().values().filter(|r| r.materialized).count()
    }

    /// Exact top-`k` by cosine similarity, ties broken by ascending id.
    pub fn search(&self, query_tokens: &[u32], k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(RetrievalError::InvalidArgument("k must be at least 1".into()));
        }
        let q = embed(query_tokens, self.dim)?;
        let records = self.records.read().unwrap();
        let mut scored: Vec<(f64, &ChunkId)> = records.values().map(|r| (cosine(&q, &r.embedding), &r.id)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        scored.truncate(k);
        Ok(RetrievalResult {
            ids: scored.iter().map(|(_, id)| (*id).clone()).collect(),
            scores: scored.iter().map(|(s, _)| *s).collect(),
        })
    }

    fn make_record(&self, id: ChunkId, doc_id: &str, tokens: Vec<u32>, materialized: bool) -> Result<ChunkRecord> {
        let embedding = embed(&tokens, self.dim)?;
        Ok(ChunkRecord { id, doc_id: doc_id.to_string(), tokens, embedding, materialized })
    }

    fn insert(&self, record: ChunkRecord) {
        self.records.write().unwrap().insert(record.id.clone(), record);
    }

    fn take(&self, id: &ChunkId) -> Option<ChunkRecord> {
        self.records.write().unwrap().remove(id)
    }

    fn chunks_of(&self, doc_id: &str) -> Vec<ChunkId> {
        self.records.read().unwrap().values().filter(|r| r.doc_id == doc_id).map(|r| r.id.clone()).collect()
    }

    /// Writes the index as JSON lines (embeddings are recomputed on load).
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| RetrievalError::Io { path: path.display().to_string(), source };
        let tmp = path.with_extension("jsonl.tmp");
        let mut w = BufWriter::new(fs::File::create(&tmp).map_err(io)?);
        for r in self.records.read().unwrap().values() {
            serde_json::to_writer(&mut w, r).expect("record serializes");
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)?;
        drop(w);
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path, dim: usize, chunk_size: usize) -> Result<Self> {
        let index = Self::new(dim, chunk_size)?;
        let display = path.display().to_string();
        let f = fs::File::open(path).map_err(|source| RetrievalError::Io { path: display.clone(), source })?;
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|source| RetrievalError::Io { path: display.clone(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ChunkRecord = serde_json::from_str(&line)
                .map_err(|e| RetrievalError::Parse { path: display.clone(), line: n + 1, message: e.to_string() })?;
            let r = index.make_record(r.id, &r.doc_id, r.tokens, r.materialized)?;
            index.insert(r);
        }
        Ok(index)
    }
}

fn chunk_id_for(doc_id: &str, i: usize) -> Result<ChunkId> {
    Ok(ChunkId::new(format!("{doc_id}-{i}"))?)
}

/// Chunks a document, indexes every chunk, and materializes the chunks the
/// admission policy wants now. Re-ingesting a document id replaces its
/// previous chunks.
pub fn ingest(
    index: &VectorIndex,
    store: &KvStore,
    model: &Model,
    policy: &AdmissionPolicy,
    doc_id: &str,
    tokens: &[u32],
) -> std::result::Result<Vec<ChunkId>, IngestError> {
    let fail = |committed: Vec<ChunkId>, source: RetrievalError| IngestError { doc_id: doc_id.to_string(), committed, source };
    let chunks = chunk_document(tokens, index.chunk_size()).map_err(|e| fail(Vec::new(), e))?;
    let ids: Vec<ChunkId> = (0..chunks.len().max(1))
        .map(|i| chunk_id_for(doc_id, i))
        .collect::<Result<_>>()
        .map_err(|e| fail(Vec::new(), e))?;

    for old in index.chunks_of(doc_id) {
        remove(index, store, &old).map_err(|e| fail(Vec::new(), e))?;
    }

    let mut committed = Vec::with_capacity(chunks.len());
    for (chunk, id) in chunks.into_iter().zip(ids) {
        let step = || -> Result<ChunkRecord> {
            let eager = policy.on_ingest(&id) == IngestDecision::MaterializeNow;
            if eager {
                let (cache, _) = model.prefill(&chunk, 0)?;
                store.store_kv(&id, &cache)?;
            }
            index.make_record(id.clone(), doc_id, chunk, eager)
        };
        match step() {
            Ok(record) => {
                index.insert(record);
                committed.push(id);
            }
            Err(e) => return Err(fail(committed, e)),
        }
    }
    Ok(committed)
}

pub fn search(index: &VectorIndex, query_tokens: &[u32], k: usize) -> Result<RetrievalResult> {
    index.search(query_tokens, k)
}

/// Removes the record and its KV file. If the file cannot be deleted the
/// record is put back.
pub fn remove(index: &VectorIndex, store: &KvStore, id: &ChunkId) -> Result<bool> {
    let Some(record) = index.take(id) else {
        return Ok(false);
    };
    if let Err(e) = store.delete_kv(id) {
        index.insert(record);
        return Err(e.into());
    }
    Ok(true)
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusDoc {
    pub id: String,
    pub tokens: Vec<u32>,
}

/// Parses a JSON-lines corpus. Errors cite the 1-based line number.
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusDoc>> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| RetrievalError::Io { path: display.clone(), source })?;
    parse_corpus(&text, &display)
}

pub fn parse_corpus(text: &str, origin: &str) -> Result<Vec<CorpusDoc>> {
    let mut docs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: CorpusDoc = serde_json::from_str(line)
            .map_err(|e| RetrievalError::Parse { path: origin.to_string(), line: n + 1, message: e.to_string() })?;
        docs.push(doc);
    }
    Ok(docs)
}
