//! Subcommand implementations behind the `matkv` binary. Each command
//! returns a serializable report; `main.rs` only parses flags and prints.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{self, BreakEvenResult, CostParams, EnergyComparison, SecPerMbMode};
use crate::kvstore::{ChunkId, KvStore};
use crate::model::{build_model, ModelConfig};
use crate::pipeline::{
    Batch, BatchReport, Engine, EngineOptions, LatencyBreakdown, Mode, PositioningRule, Request, SimulatedTimes,
    StageSpan,
};
use crate::policy::{AdmissionPolicy, EvictionPolicy};
use crate::retrieval::{self, VectorIndex, DEFAULT_EMBED_DIM};
use crate::workload::{self, SkewReport, WorkloadSpec};

pub const SCHEMA_VERSION: u32 = 1;
pub const STORE_DIR_ENV: &str = "MATKV_STORE_DIR";
pub const INDEX_FILE: &str = "index.jsonl";
/// Length of query token sequences synthesized for trace lines without one.
pub const SYNTH_QUERY_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown output format {other:?} (expected json or csv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub model: ModelConfig,
    pub store_dir: PathBuf,
    pub chunk_size: usize,
    pub top_k: usize,
    pub embed_dim: usize,
    pub max_new_tokens: usize,
    pub positioning: PositioningRule,
    pub admission: AdmissionPolicy,
    pub eviction: EvictionPolicy,
    pub load_parallelism: usize,
    pub handoff_depth: Option<usize>,
    pub access_interval_s: f64,
    pub simulate: Option<SimulatedTimes>,
    pub output: OutputFormat,
    pub cost: CostParams,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let options = EngineOptions::default();
        Self {
            model: ModelConfig::default(),
            store_dir: PathBuf::from("matkv-store"),
            chunk_size: 128,
            top_k: 1,
            embed_dim: DEFAULT_EMBED_DIM,
            max_new_tokens: 8,
            positioning: options.positioning,
            admission: AdmissionPolicy::default(),
            eviction: EvictionPolicy::default(),
            load_parallelism: options.load_parallelism,
            handoff_depth: options.handoff_depth,
            access_interval_s: options.access_interval_s,
            simulate: None,
            output: OutputFormat::Json,
            cost: CostParams::default(),
        }
    }
}

impl EngineConfig {
    /// Reads `path` (defaults when `None`) and applies the store-dir
    /// environment override.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?
            }
        };
        if let Some(dir) = std::env::var_os(STORE_DIR_ENV) {
            cfg.store_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| CliError::Usage(format!("invalid model config: {e}")))?;
        self.admission.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.eviction.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.cost.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        for (name, v) in [
            ("chunk_size", self.chunk_size),
            ("top_k", self.top_k),
            ("embed_dim", self.embed_dim),
            ("load_parallelism", self.load_parallelism),
        ] {
            if v == 0 {
                return Err(CliError::Usage(format!("{name} must be positive")));
            }
        }
        if self.handoff_depth == Some(0) {
            return Err(CliError::Usage("handoff_depth must be positive or null".into()));
        }
        if !(self.access_interval_s.is_finite() && self.access_interval_s >= 0.0) {
            return Err(CliError::Usage("access_interval_s must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn index_path(&self) -> PathBuf {
        self.store_dir.join(INDEX_FILE)
    }

    /// Builds the model, opens the store, and loads the persisted index if
    /// one exists.
    pub fn open_engine(&self) -> Result<Engine> {
        let model = Arc::new(build_model(self.model.clone()).map_err(runtime)?);
        let store = KvStore::open(&self.store_dir, model.config_hash()).map_err(runtime)?;
        let index_path = self.index_path();
        let index = if index_path.exists() {
            VectorIndex::load(&index_path, self.embed_dim, self.chunk_size).map_err(runtime)?
        } else {
            VectorIndex::new(self.embed_dim, self.chunk_size).map_err(runtime)?
        };
        let options = EngineOptions {
            positioning: self.positioning,
            load_parallelism: self.load_parallelism,
            handoff_depth: self.handoff_depth,
            access_interval_s: self.access_interval_s,
        };
        Engine::new(model, store, index, self.admission, self.eviction, options).map_err(runtime)
    }

    pub fn save_index(&self, engine: &Engine) -> Result<()> {
        engine.index().save(&self.index_path()).map_err(runtime)
    }
}

pub fn parse_mode(s: &str) -> Result<Mode> {
    Mode::from_str(s).map_err(CliError::Usage)
}

/// Parses `"1,2,3"` (whitespace also accepted as a separator).
pub fn parse_tokens(s: &str) -> Result<Vec<u32>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u32>().map_err(|e| CliError::Usage(format!("bad token {t:?}: {e}"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub schema_version: u32,
    pub docs: usize,
    pub chunks: usize,
    pub materialized: usize,
    pub bytes: u64,
}

pub fn cmd_ingest(config: &EngineConfig, corpus_path: &Path) -> Result<IngestSummary> {
    let docs = retrieval::read_corpus(corpus_path).map_err(runtime)?;
    let engine = config.open_engine()?;
    let mut outcome = Ok(());
    for doc in &docs {
        if let Err(e) = engine.ingest(&doc.id, &doc.tokens) {
            outcome = Err(runtime(e));
            break;
        }
    }
    // whatever committed stays consistent between index and store
    config.save_index(&engine)?;
    outcome?;
    let stats = engine.store().stats().map_err(runtime)?;
    Ok(IngestSummary {
        schema_version: SCHEMA_VERSION,
        docs: docs.len(),
        chunks: engine.index().len(),
        materialized: engine.index().materialized_count(),
        bytes: stats.bytes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub schema_version: u32,
    pub mode: Mode,
    pub query_tokens: Vec<u32>,
    pub retrieved_ids: Vec<ChunkId>,
    pub scores: Vec<f64>,
    pub generated: Vec<u32>,
    pub breakdown: LatencyBreakdown,
}

pub fn cmd_query(
    config: &EngineConfig,
    query_tokens: &[u32],
    mode: Mode,
    max_new_tokens: Option<usize>,
) -> Result<QueryReport> {
    if query_tokens.is_empty() {
        return Err(CliError::Usage("query needs at least one token".into()));
    }
    let engine = config.open_engine()?;
    if engine.index().is_empty() {
        return Err(CliError::Runtime(format!("index at {} is empty; run ingest first", config.index_path().display())));
    }
    let hits = engine.search(query_tokens, config.top_k).map_err(runtime)?;
    let request = Request {
        query_tokens: query_tokens.to_vec(),
        retrieved_ids: hits.ids.clone(),
        max_new_tokens: max_new_tokens.unwrap_or(config.max_new_tokens),
    };
    let out = engine.run(mode, &request).map_err(runtime)?;
    // lazy materialization and eviction change the index's flags
    config.save_index(&engine)?;
    Ok(QueryReport {
        schema_version: SCHEMA_VERSION,
        mode,
        query_tokens: request.query_tokens,
        retrieved_ids: hits.ids,
        scores: hits.scores,
        generated: out.generated,
        breakdown: out.breakdown,
    })
}

/// One line of a bench trace. Either a full request, or a workload trace
/// line: missing query tokens are synthesized from the seed and the query
/// index, missing ids are filled by search.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceEntry {
    pub query_index: Option<usize>,
    pub query_tokens: Option<Vec<u32>>,
    #[serde(alias = "ids")]
    pub retrieved_ids: Option<Vec<ChunkId>>,
    pub max_new_tokens: Option<usize>,
}

pub fn parse_trace(text: &str, origin: &str) -> Result<Vec<TraceEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: TraceEntry = serde_json::from_str(line)
            .map_err(|e| CliError::Runtime(format!("{origin}:{}: invalid trace line: {e}", n + 1)))?;
        out.push(e);
    }
    if out.is_empty() {
        return Err(CliError::Runtime(format!("{origin}: trace has no requests")));
    }
    Ok(out)
}

pub fn synth_query(seed: u64, query_index: usize, vocab_size: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (query_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..SYNTH_QUERY_LEN).map(|_| rng.random_range(0..vocab_size as u32)).collect()
}

pub fn resolve_trace(engine: &Engine, config: &EngineConfig, entries: &[TraceEntry], seed: u64) -> Result<Vec<Request>> {
    entries
        .iter()
        .enumerate()
        .map(|(line, e)| {
            let qi = e.query_index.unwrap_or(line);
            let query_tokens =
                e.query_tokens.clone().unwrap_or_else(|| synth_query(seed, qi, config.model.vocab_size));
            let retrieved_ids = match &e.retrieved_ids {
                Some(ids) => ids.clone(),
                None => engine.search(&query_tokens, config.top_k).map_err(runtime)?.ids,
            };
            let r = Request {
                query_tokens,
                retrieved_ids,
                max_new_tokens: e.max_new_tokens.unwrap_or(config.max_new_tokens),
            };
            r.validate().map_err(|err| CliError::Runtime(format!("trace request {}: {err}", line + 1)))?;
            Ok(r)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub batch: usize,
    pub requests: usize,
    #[serde(flatten)]
    pub breakdown: LatencyBreakdown,
    #[serde(flatten)]
    pub span: StageSpan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: Mode,
    pub batch_size: usize,
    pub n_requests: usize,
    pub batches: Vec<BatchRow>,
    pub total: LatencyBreakdown,
    pub makespan_s: f64,
    pub speedup_vs_vanilla: Option<f64>,
    pub store_files: u64,
    pub store_bytes: u64,
    pub energy_j: f64,
    pub generated: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSuite {
    pub schema_version: u32,
    pub reports: Vec<BenchReport>,
}

impl BenchSuite {
    pub fn report(&self, mode: Mode) -> Option<&BenchReport> {
        self.reports.iter().find(|r| r.mode == mode)
    }
}

pub fn cmd_bench(
    config: &EngineConfig,
    trace_path: &Path,
    modes: &[Mode],
    batch_size: usize,
    seed: u64,
) -> Result<BenchSuite> {
    if batch_size == 0 {
        return Err(CliError::Usage("batch size must be positive".into()));
    }
    if modes.is_empty() {
        return Err(CliError::Usage("no modes selected".into()));
    }
    let text = fs::read_to_string(trace_path)
        .map_err(|e| CliError::Usage(format!("cannot read trace {}: {e}", trace_path.display())))?;
    let entries = parse_trace(&text, &trace_path.display().to_string())?;
    let engine = config.open_engine()?;
    let requests = resolve_trace(&engine, config, &entries, seed)?;
    let batches: Vec<Batch> = requests.chunks(batch_size).map(|c| c.to_vec()).collect();

    let mut runs: Vec<BatchReport> = Vec::with_capacity(modes.len());
    for &mode in modes {
        runs.push(engine.run_batches(mode, &batches, config.simulate.as_ref()).map_err(runtime)?);
    }
    config.save_index(&engine)?;
    let stats = engine.store().stats().map_err(runtime)?;
    let vanilla = runs.iter().find(|r| r.mode == Mode::Vanilla).map(|r| r.makespan_s);
    let reports = runs
        .into_iter()
        .map(|run| {
            let total = run.breakdown();
            BenchReport {
                mode: run.mode,
                batch_size,
                n_requests: requests.len(),
                batches: run
                    .batches
                    .iter()
                    .map(|b| BatchRow { batch: b.batch, requests: b.generated.len(), breakdown: b.breakdown, span: b.span })
                    .collect(),
                total,
                makespan_s: run.makespan_s,
                speedup_vs_vanilla: vanilla.map(|v| v / run.makespan_s),
                store_files: stats.files,
                store_bytes: stats.bytes,
                energy_j: costmodel::phase_energy_j(&config.cost, total.load_s, total.prefill_s, total.decode_s),
                generated: run.generated(),
            }
        })
        .collect();
    Ok(BenchSuite { schema_version: SCHEMA_VERSION, reports })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub schema_version: u32,
    pub mode: SecPerMbMode,
    pub params: CostParams,
    pub break_even: BreakEvenResult,
    pub energy: EnergyComparison,
}

pub fn cmd_costmodel(params_path: Option<&Path>, mode: SecPerMbMode) -> Result<CostReport> {
    let params = match params_path {
        None => CostParams::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read params {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid params {}: {e}", p.display())))?
        }
    };
    let break_even = costmodel::break_even(&params, mode).map_err(|e| CliError::Usage(e.to_string()))?;
    let energy = costmodel::energy_comparison(&params).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(CostReport { schema_version: SCHEMA_VERSION, mode, params, break_even, energy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSummary {
    pub schema_version: u32,
    pub spec: WorkloadSpec,
    pub corpus_path: PathBuf,
    pub trace_path: PathBuf,
    pub skew_path: PathBuf,
    pub n_accessed_ge2: usize,
    pub fraction_ge2: f64,
}

pub fn load_workload_spec(path: &Path, seed: Option<u64>) -> Result<WorkloadSpec> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read spec {}: {e}", path.display())))?;
    let mut spec: WorkloadSpec =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid spec {}: {e}", path.display())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(spec)
}

/// Writes `corpus.jsonl`, `trace.jsonl` and `skew.json` under `out_dir`.
pub fn cmd_workload(spec: &WorkloadSpec, out_dir: &Path) -> Result<WorkloadSummary> {
    let io_err = |p: &Path, e: io::Error| CliError::Runtime(format!("{}: {e}", p.display()));
    let corpus = workload::generate_corpus(spec).map_err(|e| CliError::Usage(e.to_string()))?;
    let accesses = workload::generate_accesses(spec).map_err(|e| CliError::Usage(e.to_string()))?;
    let skew: SkewReport = workload::skew_report(&accesses, spec.n_docs);
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let corpus_path = out_dir.join("corpus.jsonl");
    fs::write(&corpus_path, workload::corpus_jsonl(&corpus)).map_err(|e| io_err(&corpus_path, e))?;
    let trace_path = out_dir.join("trace.jsonl");
    let mut trace = String::new();
    for line in workload::trace_lines(spec, &accesses) {
        trace.push_str(&serde_json::to_string(&line).expect("trace line serializes"));
        trace.push('\n');
    }
    fs::write(&trace_path, trace).map_err(|e| io_err(&trace_path, e))?;
    let skew_path = out_dir.join("skew.json");
    fs::write(&skew_path, serde_json::to_string_pretty(&skew).expect("skew serializes"))
        .map_err(|e| io_err(&skew_path, e))?;

    Ok(WorkloadSummary {
        schema_version: SCHEMA_VERSION,
        spec: spec.clone(),
        corpus_path,
        trace_path,
        skew_path,
        n_accessed_ge2: skew.n_accessed_ge2,
        fraction_ge2: skew.fraction_ge2,
    })
}

/// Flat CSV rows. Every report renders as rows of one of these shapes.
pub trait CsvReport {
    fn write_csv(&self, out: &mut dyn io::Write) -> Result<()>;
}

fn csv_writer(out: &mut dyn io::Write) -> csv::Writer<&mut dyn io::Write> {
    csv::Writer::from_writer(out)
}

fn csv_done<W: io::Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(runtime)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCsvRow {
    pub schema_version: u32,
    pub mode: Mode,
    pub batch: usize,
    pub requests: usize,
    pub load_s: f64,
    pub prefill_s: f64,
    pub decode_s: f64,
    pub a_start: f64,
    pub a_end: f64,
    pub b_start: f64,
    pub b_end: f64,
    pub makespan_s: f64,
    pub speedup_vs_vanilla: Option<f64>,
    pub energy_j: f64,
}

impl BenchSuite {
    pub fn csv_rows(&self) -> Vec<BenchCsvRow> {
        let mut rows = Vec::new();
        for r in &self.reports {
            for b in &r.batches {
                rows.push(BenchCsvRow {
                    schema_version: self.schema_version,
                    mode: r.mode,
                    batch: b.batch,
                    requests: b.requests,
                    load_s: b.breakdown.load_s,
                    prefill_s: b.breakdown.prefill_s,
                    decode_s: b.breakdown.decode_s,
                    a_start: b.span.a_start,
                    a_end: b.span.a_end,
                    b_start: b.span.b_start,
                    b_end: b.span.b_end,
                    makespan_s: r.makespan_s,
                    speedup_vs_vanilla: r.speedup_vs_vanilla,
                    energy_j: r.energy_j,
                });
            }
        }
        rows
    }
}

impl CsvReport for BenchSuite {
    fn write_csv(&self, out: &mut dyn io::Write) -> Result<()> {
        let mut w = csv_writer(out);
        for row in self.csv_rows() {
            w.serialize(row).map_err(runtime)?;
        }
        csv_done(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCsvRow {
    pub schema_version: u32,
    pub mode: Mode,
    pub retrieved_ids: String,
    pub generated: String,
    pub load_s: f64,
    pub prefill_s: f64,
    pub decode_s: f64,
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

impl QueryReport {
    pub fn csv_row(&self) -> QueryCsvRow {
        QueryCsvRow {
            schema_version: self.schema_version,
            mode: self.mode,
            retrieved_ids: join(&self.retrieved_ids),
            generated: join(&self.generated),
            load_s: self.breakdown.load_s,
            prefill_s: self.breakdown.prefill_s,
            decode_s: self.breakdown.decode_s,
        }
    }
}

impl CsvReport for QueryReport {
    fn write_csv(&self, out: &mut dyn io::Write) -> Result<()> {
        let mut w = csv_writer(out);
        w.serialize(self.csv_row()).map_err(runtime)?;
        csv_done(w)
    }
}

impl CsvReport for IngestSummary {
    fn write_csv(&self, out: &mut dyn io::Write) -> Result<()> {
        let mut w = csv_writer(out);
        w.serialize(self).map_err(runtime)?;
        csv_done(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCsvRow {
    pub schema_version: u32,
    pub mode: SecPerMbMode,
    pub t_seconds: f64,
    pub t_days: f64,
    pub energy_ratio: f64,
    pub prefill_j: f64,
    pub load_j: f64,
}

impl CostReport {
    pub fn csv_row(&self) -> CostCsvRow {
        CostCsvRow {
            schema_version: self.schema_version,
            mode: self.mode,
            t_seconds: self.break_even.t_seconds,
            t_days: self.break_even.t_days,
            energy_ratio: self.energy.ratio,
            prefill_j: self.energy.prefill_j,
            load_j: self.energy.load_j,
        }
    }
}

impl CsvReport for CostReport {
    fn write_csv(&self, out: &mut dyn io::Write) -> Result<()> {
        let mut w = csv_writer(out);
        w.serialize(self.csv_row()).map_err(runtime)?;
        csv_done(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadCsvRow {
    pub schema_version: u32,
    pub n_docs: usize,
    pub n_queries: usize,
    pub top_k: usize,
    pub zipf_s: f64,
    pub seed: u64,
    pub n_accessed_ge2: usize,
    pub fraction_ge2: f64,
}

impl CsvReport for WorkloadSummary {
    fn write_csv(&self, out: &mut dyn io::Write) -> Result<()> {
        let mut w = csv_writer(out);
        w.serialize(WorkloadCsvRow {
            schema_version: self.schema_version,
            n_docs: self.spec.n_docs,
            n_queries: self.spec.n_queries,
            top_k: self.spec.top_k,
            zipf_s: self.spec.zipf_s,
            seed: self.spec.seed,
            n_accessed_ge2: self.n_accessed_ge2,
            fraction_ge2: self.fraction_ge2,
        })
        .map_err(runtime)?;
        csv_done(w)
    }
}

/// Renders `report` in `format`, followed by a newline for JSON.
pub fn render<R: Serialize + CsvReport>(report: &R, format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Json => Ok(serde_json::to_string_pretty(report).map_err(runtime)? + "\n"),
        OutputFormat::Csv => {
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            String::from_utf8(buf).map_err(runtime)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_lists_parse() {
        assert_eq!(parse_tokens("1,2, 3").unwrap(), [1, 2, 3]);
        assert_eq!(parse_tokens("4 5").unwrap(), [4, 5]);
        assert!(matches!(parse_tokens("1,x"), Err(CliError::Usage(_))));
        assert!(matches!(parse_mode("turbo"), Err(CliError::Usage(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage(String::new()).exit_code(), 1);
        assert_eq!(CliError::Runtime(String::new()).exit_code(), 2);
    }

    #[test]
    fn config_defaults_and_rejections() {
        let cfg: EngineConfig = serde_json::from_str(r#"{"top_k": 3}"#).unwrap();
        assert_eq!(cfg.top_k, 3);
        assert_eq!(cfg.chunk_size, 128);
        assert!(serde_json::from_str::<EngineConfig>(r#"{"topk": 3}"#).is_err());
        assert!(EngineConfig { top_k: 0, ..Default::default() }.validate().is_err());
        assert!(EngineConfig { handoff_depth: Some(0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn trace_lines_accept_both_shapes() {
        let t = parse_trace("{\"query_index\": 3, \"ids\": [\"a-0\"]}\n\n{\"query_tokens\": [1, 2]}\n", "t").unwrap();
        assert_eq!(t[0].retrieved_ids.as_ref().unwrap()[0].as_str(), "a-0");
        assert_eq!(t[1].query_tokens.as_deref(), Some(&[1u32, 2][..]));
        let err = parse_trace("{}\n{oops}\n", "trace.jsonl").unwrap_err();
        assert!(err.to_string().contains("trace.jsonl:2"), "{err}");
    }

    #[test]
    fn synthesized_queries_are_stable() {
        assert_eq!(synth_query(7, 3, 256), synth_query(7, 3, 256));
        assert_ne!(synth_query(7, 3, 256), synth_query(7, 4, 256));
        assert!(synth_query(1, 0, 10).iter().all(|&t| t < 10));
    }

    #[test]
    fn costmodel_report() {
        let r = cmd_costmodel(None, SecPerMbMode::Unit).unwrap();
        assert!((r.break_even.t_days - 11.574).abs() < 1e-3);
        assert!(matches!(
            cmd_costmodel(Some(Path::new("/nonexistent/params.json")), SecPerMbMode::Unit),
            Err(CliError::Usage(_))
        ));
        let back: CostReport = serde_json::from_str(&render(&r, OutputFormat::Json).unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = render(&r, OutputFormat::Csv).unwrap();
        let mut rd = csv::Reader::from_reader(csv.as_bytes());
        let row: CostCsvRow = rd.deserialize().next().unwrap().unwrap();
        assert_eq!(row, r.csv_row());
    }
}
