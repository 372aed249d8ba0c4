use std::ops::Range;

use super::{ModelConfig, ModelError, Result};

/// Per-layer key/value tensors for a run of tokens.
///
/// Logical shape is `[n_layers][n_tokens][n_heads][head_dim]` for both keys
/// and values. Each layer is stored as its own token-major buffer so tokens
/// can be appended without reshuffling. Keys are stored after rotary
/// encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    config_hash: u64,
    n_heads: usize,
    head_dim: usize,
    base_position: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl KvCache {
    pub fn empty(config: &ModelConfig, config_hash: u64) -> Self {
        Self {
            config_hash,
            n_heads: config.n_heads,
            head_dim: config.head_dim,
            base_position: 0,
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
        }
    }

    /// Builds a cache from per-layer token-major buffers, checking shapes.
    pub fn from_layers(
        config_hash: u64,
        n_heads: usize,
        head_dim: usize,
        base_position: usize,
        keys: Vec<Vec<f32>>,
        values: Vec<Vec<f32>>,
    ) -> Result<Self> {
        let stride = n_heads * head_dim;
        if n_heads == 0 || head_dim == 0 || keys.is_empty() {
            return Err(ModelError::Shape("cache dimensions must be positive".into()));
        }
        if keys.len() != values.len() {
            return Err(ModelError::Shape(format!("{} key layers vs {} value layers", keys.len(), values.len())));
        }
        let len = keys[0].len();
        if len % stride != 0 {
            return Err(ModelError::Shape(format!("layer buffer of {len} floats is not a multiple of {stride}")));
        }
        if keys.iter().chain(&values).any(|l| l.len() != len) {
            return Err(ModelError::Shape("layers differ in token count".into()));
        }
        Ok(Self { config_hash, n_heads, head_dim, base_position, keys, values })
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn n_tokens(&self) -> usize {
        self.keys[0].len() / self.token_stride()
    }

    pub fn base_position(&self) -> usize {
        self.base_position
    }

    pub(crate) fn set_base_position(&mut self, pos: usize) {
        self.base_position = pos;
    }

    /// Floats per token per layer (`n_heads * head_dim`).
    pub fn token_stride(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn layer_keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer]
    }

    pub fn layer_values(&self, layer: usize) -> &[f32] {
        &self.values[layer]
    }

    /// Total floats across keys and values.
    pub fn n_elements(&self) -> usize {
        2 * self.n_layers() * self.n_tokens() * self.token_stride()
    }

    pub fn is_finite(&self) -> bool {
        self.keys.iter().chain(&self.values).flatten().all(|v| v.is_finite())
    }

    pub(crate) fn push_token(&mut self, layer: usize, k: &[f32], v: &[f32]) {
        self.keys[layer].extend_from_slice(k);
        self.values[layer].extend_from_slice(v);
    }

    pub(crate) fn append(&mut self, other: &KvCache) {
        for l in 0..self.keys.len() {
            self.keys[l].extend_from_slice(&other.keys[l]);
            self.values[l].extend_from_slice(&other.values[l]);
        }
    }

    /// Copy of the tokens in `range`. Keys keep their rotary phases and the
    /// base position is carried over unchanged.
    pub fn slice_tokens(&self, range: Range<usize>) -> KvCache {
        let s = self.token_stride();
        let cut = |layers: &Vec<Vec<f32>>| -> Vec<Vec<f32>> {
            layers.iter().map(|l| l[range.start * s..range.end * s].to_vec()).collect()
        };
        KvCache {
            config_hash: self.config_hash,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            base_position: self.base_position,
            keys: cut(&self.keys),
            values: cut(&self.values),
        }
    }
}
