//! Python bindings: the toy model, the on-disk KV store, the engine, and the
//! analytic helpers.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use matkv_core::cli::EngineConfig;
use matkv_core::costmodel::{self, CostParams, SecPerMbMode};
use matkv_core::kvstore::{ChunkId, KvStore, StoreError};
use matkv_core::model::{KvCache, Model, ModelConfig};
use matkv_core::pipeline::{self, Engine, Mode, Request};
use matkv_core::workload::{self, WorkloadSpec};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn store_err(e: StoreError) -> PyErr {
    match e {
        StoreError::Io { .. } | StoreError::NotFound(_) => PyIOError::new_err(e.to_string()),
        StoreError::InvalidId(_) | StoreError::InvalidCache(_) => value_err(e),
        other => runtime_err(other),
    }
}

fn chunk_id(id: &str) -> PyResult<ChunkId> {
    ChunkId::new(id).map_err(value_err)
}

#[pyclass(name = "KvCache", module = "matkv", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyKvCache {
    inner: KvCache,
}

#[pymethods]
impl PyKvCache {
    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.n_heads()
    }

    #[getter]
    fn head_dim(&self) -> usize {
        self.inner.head_dim()
    }

    #[getter]
    fn n_tokens(&self) -> usize {
        self.inner.n_tokens()
    }

    #[getter]
    fn base_position(&self) -> usize {
        self.inner.base_position()
    }

    #[getter]
    fn config_hash(&self) -> u64 {
        self.inner.config_hash()
    }

    /// Keys of one layer, token-major (`n_tokens * n_heads * head_dim`).
    fn keys(&self, layer: usize) -> PyResult<Vec<f32>> {
        self.check_layer(layer)?;
        Ok(self.inner.layer_keys(layer).to_vec())
    }

    fn values(&self, layer: usize) -> PyResult<Vec<f32>> {
        self.check_layer(layer)?;
        Ok(self.inner.layer_values(layer).to_vec())
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "KvCache(n_layers={}, n_heads={}, head_dim={}, n_tokens={}, base_position={})",
            self.inner.n_layers(),
            self.inner.n_heads(),
            self.inner.head_dim(),
            self.inner.n_tokens(),
            self.inner.base_position()
        )
    }
}

impl PyKvCache {
    fn check_layer(&self, layer: usize) -> PyResult<()> {
        if layer >= self.inner.n_layers() {
            return Err(value_err(format!("layer {layer} out of range (n_layers={})", self.inner.n_layers())));
        }
        Ok(())
    }
}

#[pyclass(name = "Model", module = "matkv", frozen)]
struct PyModel {
    inner: Arc<Model>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (n_layers=2, n_heads=2, head_dim=8, vocab_size=256, ffn_dim=64, seed=0, max_position=4096))]
    fn new(
        n_layers: usize,
        n_heads: usize,
        head_dim: usize,
        vocab_size: usize,
        ffn_dim: usize,
        seed: u64,
        max_position: usize,
    ) -> PyResult<Self> {
        let config =
            ModelConfig { n_layers, n_heads, head_dim, vocab_size, ffn_dim, seed, max_position, ..ModelConfig::default() };
        Ok(Self { inner: Arc::new(Model::new(config).map_err(value_err)?) })
    }

    #[getter]
    fn config_hash(&self) -> u64 {
        self.inner.config_hash()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config().vocab_size
    }

    /// Returns `(cache, last_logits)`.
    #[pyo3(signature = (tokens, base_position=0))]
    fn prefill(&self, py: Python<'_>, tokens: Vec<u32>, base_position: usize) -> PyResult<(PyKvCache, Vec<f32>)> {
        let model = &self.inner;
        let (cache, logits) = py.detach(|| model.prefill(&tokens, base_position)).map_err(value_err)?;
        Ok((PyKvCache { inner: cache }, logits))
    }

    fn decode_step(&self, past: &PyKvCache, token: u32, position: usize) -> PyResult<(PyKvCache, Vec<f32>)> {
        let (cache, logits) = self.inner.decode_step(&past.inner, token, position).map_err(value_err)?;
        Ok((PyKvCache { inner: cache }, logits))
    }

    /// Greedy continuation of `tokens` from position 0.
    fn generate(&self, py: Python<'_>, tokens: Vec<u32>, max_new_tokens: usize) -> PyResult<Vec<u32>> {
        let model = &self.inner;
        py.detach(|| {
            let (cache, logits) = model.prefill(&tokens, 0)?;
            model.generate_greedy(cache, &logits, tokens.len(), max_new_tokens)
        })
        .map_err(value_err)
    }

    fn concat_caches(&self, caches: Vec<PyRef<'_, PyKvCache>>) -> PyResult<PyKvCache> {
        let owned: Vec<KvCache> = caches.iter().map(|c| c.inner.clone()).collect();
        Ok(PyKvCache { inner: self.inner.concat_caches(&owned).map_err(value_err)? })
    }
}

#[pyclass(name = "KvStore", module = "matkv", frozen)]
struct PyKvStore {
    inner: KvStore,
}

#[pymethods]
impl PyKvStore {
    #[new]
    fn new(root: PathBuf, config_hash: u64) -> PyResult<Self> {
        Ok(Self { inner: KvStore::open(root, config_hash).map_err(store_err)? })
    }

    /// Writes the cache atomically; returns the number of bytes written.
    fn store_kv(&self, id: &str, cache: &PyKvCache) -> PyResult<u64> {
        let receipt = self.inner.store_kv(&chunk_id(id)?, &cache.inner).map_err(store_err)?;
        Ok(receipt.bytes_written)
    }

    fn load_kv(&self, id: &str) -> PyResult<PyKvCache> {
        Ok(PyKvCache { inner: self.inner.load_kv(&chunk_id(id)?).map_err(store_err)? })
    }

    #[pyo3(signature = (ids, parallelism=4))]
    fn load_many(&self, ids: Vec<String>, parallelism: usize) -> PyResult<Vec<PyKvCache>> {
        let ids: Vec<ChunkId> = ids.iter().map(|s| chunk_id(s)).collect::<PyResult<_>>()?;
        let batch = self.inner.load_many(&ids, parallelism).map_err(store_err)?;
        Ok(batch.caches.into_iter().map(|inner| PyKvCache { inner }).collect())
    }

    fn delete_kv(&self, id: &str) -> PyResult<bool> {
        self.inner.delete_kv(&chunk_id(id)?).map_err(store_err)
    }

    fn contains(&self, id: &str) -> PyResult<bool> {
        Ok(self.inner.contains(&chunk_id(id)?))
    }

    fn list(&self) -> PyResult<Vec<String>> {
        Ok(self.inner.list().map_err(store_err)?.into_iter().map(String::from).collect())
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let stats = self.inner.stats().map_err(store_err)?;
        let d = PyDict::new(py);
        d.set_item("files", stats.files)?;
        d.set_item("bytes", stats.bytes)?;
        Ok(d)
    }
}

/// Model, store, index and policies built from an engine config (JSON text;
/// defaults when omitted). The index persists under the store directory.
#[pyclass(name = "Engine", module = "matkv", frozen)]
struct PyEngine {
    config: EngineConfig,
    inner: Engine,
}

#[pymethods]
impl PyEngine {
    #[new]
    #[pyo3(signature = (config_json=None, store_dir=None))]
    fn new(config_json: Option<&str>, store_dir: Option<PathBuf>) -> PyResult<Self> {
        let mut config: EngineConfig = match config_json {
            Some(text) => serde_json::from_str(text).map_err(value_err)?,
            None => EngineConfig::default(),
        };
        if let Some(dir) = store_dir {
            config.store_dir = dir;
        }
        config.validate().map_err(value_err)?;
        let inner = config.open_engine().map_err(runtime_err)?;
        Ok(Self { config, inner })
    }

    fn ingest(&self, py: Python<'_>, doc_id: &str, tokens: Vec<u32>) -> PyResult<Vec<String>> {
        let engine = &self.inner;
        let ids = py.detach(|| engine.ingest(doc_id, &tokens)).map_err(runtime_err)?;
        Ok(ids.into_iter().map(String::from).collect())
    }

    /// Top-`k` chunk ids and cosine scores; `k` defaults to the config's.
    #[pyo3(signature = (tokens, k=None))]
    fn search(&self, tokens: Vec<u32>, k: Option<usize>) -> PyResult<(Vec<String>, Vec<f64>)> {
        let hits = self.inner.search(&tokens, k.unwrap_or(self.config.top_k)).map_err(value_err)?;
        Ok((hits.ids.into_iter().map(String::from).collect(), hits.scores))
    }

    /// Runs one query. Context chunks come from search unless `ids` is given.
    #[pyo3(signature = (tokens, mode="matkv", ids=None, max_new_tokens=None))]
    fn query<'py>(
        &self,
        py: Python<'py>,
        tokens: Vec<u32>,
        mode: &str,
        ids: Option<Vec<String>>,
        max_new_tokens: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mode: Mode = mode.parse().map_err(value_err)?;
        let retrieved_ids = match ids {
            Some(ids) => ids.iter().map(|s| chunk_id(s)).collect::<PyResult<_>>()?,
            None => self.inner.search(&tokens, self.config.top_k).map_err(value_err)?.ids,
        };
        let request = Request {
            query_tokens: tokens,
            retrieved_ids,
            max_new_tokens: max_new_tokens.unwrap_or(self.config.max_new_tokens),
        };
        let engine = &self.inner;
        let out = py.detach(|| engine.run(mode, &request)).map_err(runtime_err)?;
        let d = PyDict::new(py);
        d.set_item("mode", mode.as_str())?;
        d.set_item("retrieved_ids", request.retrieved_ids.iter().map(|i| i.as_str()).collect::<Vec<_>>())?;
        d.set_item("generated", out.generated)?;
        d.set_item("load_s", out.breakdown.load_s)?;
        d.set_item("prefill_s", out.breakdown.prefill_s)?;
        d.set_item("decode_s", out.breakdown.decode_s)?;
        Ok(d)
    }

    fn remove(&self, id: &str) -> PyResult<bool> {
        self.inner.remove(&chunk_id(id)?).map_err(runtime_err)
    }

    fn save_index(&self) -> PyResult<()> {
        self.config.save_index(&self.inner).map_err(runtime_err)
    }

    #[getter]
    fn n_chunks(&self) -> usize {
        self.inner.index().len()
    }

    #[getter]
    fn materialized_count(&self) -> usize {
        self.inner.index().materialized_count()
    }
}

fn parse_params(params_json: Option<&str>) -> PyResult<CostParams> {
    match params_json {
        Some(text) => serde_json::from_str(text).map_err(value_err),
        None => Ok(CostParams::default()),
    }
}

/// Break-even access interval as `(seconds, days)`. `mode` is `"unit"` or
/// `"as-written"`; `params_json` overrides any cost parameter.
#[pyfunction]
#[pyo3(signature = (params_json=None, mode="unit"))]
fn break_even(params_json: Option<&str>, mode: &str) -> PyResult<(f64, f64)> {
    let mode: SecPerMbMode = mode.parse().map_err(value_err)?;
    let r = costmodel::break_even(&parse_params(params_json)?, mode).map_err(value_err)?;
    Ok((r.t_seconds, r.t_days))
}

#[pyfunction]
#[pyo3(signature = (prefill_j=170.0, load_j=0.14))]
fn energy_ratio(prefill_j: f64, load_j: f64) -> PyResult<f64> {
    let params = CostParams { prefill_energy_j: prefill_j, load_energy_j: load_j, ..CostParams::default() };
    Ok(costmodel::energy_comparison(&params).map_err(value_err)?.ratio)
}

#[pyfunction]
#[pyo3(signature = (load_s, compute_s, overlapped=true))]
fn predict_makespan(load_s: Vec<f64>, compute_s: Vec<f64>, overlapped: bool) -> PyResult<f64> {
    pipeline::predict_makespan(&load_s, &compute_s, overlapped).map_err(value_err)
}

/// Zipf access skew for a synthetic workload.
#[pyfunction]
#[pyo3(signature = (n_docs, n_queries, top_k=10, zipf_s=1.0, seed=0))]
fn skew_report<'py>(
    py: Python<'py>,
    n_docs: usize,
    n_queries: usize,
    top_k: usize,
    zipf_s: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = WorkloadSpec { n_docs, n_queries, top_k, zipf_s, seed, ..WorkloadSpec::default() };
    let accesses = py.detach(|| workload::generate_accesses(&spec)).map_err(value_err)?;
    let r = workload::skew_report(&accesses, n_docs);
    let d = PyDict::new(py);
    d.set_item("n_accessed_ge2", r.n_accessed_ge2)?;
    d.set_item("fraction_ge2", r.fraction_ge2)?;
    d.set_item("total_accesses", r.total_accesses)?;
    d.set_item("counts", r.counts)?;
    Ok(d)
}

#[pymodule]
fn matkv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyKvCache>()?;
    m.add_class::<PyKvStore>()?;
    m.add_class::<PyEngine>()?;
    m.add_function(wrap_pyfunction!(break_even, m)?)?;
    m.add_function(wrap_pyfunction!(energy_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(predict_makespan, m)?)?;
    m.add_function(wrap_pyfunction!(skew_report, m)?)?;
    Ok(())
}
