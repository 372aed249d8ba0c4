//! Deterministic desk-scale decoder-only transformer.
//!
//! Pre-norm blocks with RMS normalization, rotary position encoding on
//! queries and keys, a GELU feed-forward, and an untied output head. Every
//! kernel sums in a fixed order, so a sequence prefilled in one call and the
//! same sequence fed one token at a time produce bitwise-equal caches and
//! logits.

mod cache;
mod kernels;

pub use cache::KvCache;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use kernels::{apply_rope, attend, gelu, matvec, rms_norm};

/// Half-width of the uniform weight initialization interval.
pub const INIT_RANGE: f32 = 0.08;

const RMS_EPS: f32 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("token sequence must not be empty")]
    EmptyInput,
    #[error("token {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("position {needed} exceeds max_position {max}")]
    PositionOverflow { needed: usize, max: usize },
    #[error("kv cache built for config {found:#018x}, model is {expected:#018x}")]
    Incompatible { expected: u64, found: u64 },
    #[error("kv cache shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub ffn_dim: usize,
    pub seed: u64,
    pub max_position: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f32,
}

fn default_rope_theta() -> f32 {
    10_000.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            head_dim: 8,
            vocab_size: 256,
            ffn_dim: 64,
            seed: 0,
            max_position: 4096,
            rope_theta: default_rope_theta(),
        }
    }
}

impl ModelConfig {
    pub fn hidden_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("ffn_dim", self.ffn_dim),
            ("max_position", self.max_position),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.head_dim % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "head_dim must be even for rotary encoding, got {}",
                self.head_dim
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(ModelError::InvalidConfig("vocab_size exceeds u32 range".into()));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 1.0) {
            return Err(ModelError::InvalidConfig("rope_theta must be finite and > 1".into()));
        }
        Ok(())
    }

    /// Stable 64-bit digest of every field. Written into each KV file so a
    /// cache can never be replayed against a different model.
    pub fn config_hash(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write(b"matkv-model-config-v1");
        for v in [
            self.n_layers,
            self.n_heads,
            self.head_dim,
            self.vocab_size,
            self.ffn_dim,
            self.max_position,
        ] {
            h.write(&(v as u64).to_le_bytes());
        }
        h.write(&self.seed.to_le_bytes());
        h.write(&self.rope_theta.to_bits().to_le_bytes());
        h.finish()
    }
}

/// FNV-1a, 64-bit. Used where the digest must be stable across toolchains.
pub(crate) struct Fnv64(u64);

impl Fnv64 {
    pub(crate) fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// Derives an independent RNG stream for a named tensor.
fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Fnv64::new();
    h.write(&seed.to_le_bytes());
    h.write(name.as_bytes());
    ChaCha8Rng::seed_from_u64(h.finish())
}

fn init_tensor(seed: u64, name: &str, len: usize) -> Vec<f32> {
    let mut rng = tensor_rng(seed, name);
    (0..len)
        .map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE))
        .collect()
}

fn init_gain(seed: u64, name: &str, len: usize) -> Vec<f32> {
    init_tensor(seed, name, len).into_iter().map(|v| 1.0 + v).collect()
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    attn_norm: Vec<f32>,
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    ffn_norm: Vec<f32>,
    w_up: Vec<f32>,
    w_down: Vec<f32>,
}

/// Next-token scores over the vocabulary.
pub type Logits = Vec<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    config_hash: u64,
    embedding: Vec<f32>,
    blocks: Vec<Block>,
    final_norm: Vec<f32>,
    lm_head: Vec<f32>,
}

pub fn build_model(config: ModelConfig) -> Result<Model> {
    Model::new(config)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim();
        let seed = config.seed;
        let blocks = (0..config.n_layers)
            .map(|l| Block {
                attn_norm: init_gain(seed, &format!("layers.{l}.attn_norm"), d),
                wq: init_tensor(seed, &format!("layers.{l}.wq"), d * d),
                wk: init_tensor(seed, &format!("layers.{l}.wk"), d * d),
                wv: init_tensor(seed, &format!("layers.{l}.wv"), d * d),
                wo: init_tensor(seed, &format!("layers.{l}.wo"), d * d),
                ffn_norm: init_gain(seed, &format!("layers.{l}.ffn_norm"), d),
                w_up: init_tensor(seed, &format!("layers.{l}.w_up"), config.ffn_dim * d),
                w_down: init_tensor(seed, &format!("layers.{l}.w_down"), d * config.ffn_dim),
            })
            .collect();
        Ok(Self {
            embedding: init_tensor(seed, "embedding", config.vocab_size * d),
            final_norm: init_gain(seed, "final_norm", d),
            lm_head: init_tensor(seed, "lm_head", config.vocab_size * d),
            blocks,
            config_hash: config.config_hash(),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    pub fn empty_cache(&self) -> KvCache {
        KvCache::empty(&self.config, self.config_hash)
    }

    /// Runs the prompt from an empty cache with rotary positions starting at
    /// `base_position`. Returns the cache for every token and the logits of
    /// the final position.
    pub fn prefill(&self, tokens: &[u32], base_position: usize) -> Result<(KvCache, Logits)> {
        self.extend(&self.empty_cache(), tokens, base_position)
    }

    /// Feeds one token on top of `past` at rotary index `position`.
    pub fn decode_step(&self, past: &KvCache, token: u32, position: usize) -> Result<(KvCache, Logits)> {
        self.extend(past, &[token], position)
    }

    /// Prefills `tokens` on top of an existing cache. Token `i` gets rotary
    /// index `base_position + i` and attends to all of `past` plus tokens
    /// `0..=i`. Layers are processed outermost, so this is a genuinely
    /// different loop nest from repeated `decode_step` calls while sharing
    /// the per-element arithmetic.
    pub fn extend(&self, past: &KvCache, tokens: &[u32], base_position: usize) -> Result<(KvCache, Logits)> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        self.check_cache(past)?;
        self.check_tokens(tokens)?;
        let end = base_position
            .checked_add(tokens.len())
            .ok_or(ModelError::PositionOverflow { needed: usize::MAX, max: self.config.max_position })?;
        if end > self.config.max_position {
            return Err(ModelError::PositionOverflow { needed: end, max: self.config.max_position });
        }

        let d = self.config.hidden_dim();
        let n_heads = self.config.n_heads;
        let head_dim = self.config.head_dim;
        let n_past = past.n_tokens();
        let mut cache = past.clone();

        let mut hidden: Vec<Vec<f32>> = tokens
            .iter()
            .map(|&t| self.embedding[t as usize * d..(t as usize + 1) * d].to_vec())
            .collect();

        let mut normed = vec![0.0f32; d];
        let mut attn_out = vec![0.0f32; d];
        let mut proj = vec![0.0f32; d];
        let mut up = vec![0.0f32; self.config.ffn_dim];
        for (layer, block) in self.blocks.iter().enumerate() {
            let mut queries = Vec::with_capacity(tokens.len());
            for (i, x) in hidden.iter().enumerate() {
                let pos = base_position + i;
                rms_norm(x, &block.attn_norm, RMS_EPS, &mut normed);
                let mut q = vec![0.0f32; d];
                let mut k = vec![0.0f32; d];
                let mut v = vec![0.0f32; d];
                matvec(&block.wq, &normed, &mut q);
                matvec(&block.wk, &normed, &mut k);
                matvec(&block.wv, &normed, &mut v);
                for h in 0..n_heads {
                    let r = h * head_dim..(h + 1) * head_dim;
                    apply_rope(&mut q[r.clone()], pos, self.config.rope_theta);
                    apply_rope(&mut k[r], pos, self.config.rope_theta);
                }
                cache.push_token(layer, &k, &v);
                queries.push(q);
            }

            let keys = cache.layer_keys(layer);
            let values = cache.layer_values(layer);
            for (i, (x, q)) in hidden.iter_mut().zip(&queries).enumerate() {
                let visible = n_past + i + 1;
                for h in 0..n_heads {
                    let r = h * head_dim..(h + 1) * head_dim;
                    attend(
                        &q[r.clone()],
                        keys,
                        values,
                        visible,
                        d,
                        h * head_dim,
                        &mut attn_out[r],
                    );
                }
                matvec(&block.wo, &attn_out, &mut proj);
                for (xi, p) in x.iter_mut().zip(&proj) {
                    *xi += p;
                }

                rms_norm(x, &block.ffn_norm, RMS_EPS, &mut normed);
                matvec(&block.w_up, &normed, &mut up);
                up.iter_mut().for_each(|u| *u = gelu(*u));
                matvec(&block.w_down, &up, &mut proj);
                for (xi, p) in x.iter_mut().zip(&proj) {
                    *xi += p;
                }
            }
        }

        let last = hidden.last().expect("non-empty tokens");
        rms_norm(last, &self.final_norm, RMS_EPS, &mut normed);
        let mut logits = vec![0.0f32; self.config.vocab_size];
        matvec(&self.lm_head, &normed, &mut logits);
        Ok((cache, logits))
    }

    /// Concatenates caches along the token axis in list order. Rotary
    /// phases already baked into the keys are kept as-is, so each
    /// constituent keeps the positions it was prefilled with.
    pub fn concat_caches(&self, caches: &[KvCache]) -> Result<KvCache> {
        let mut out = self.empty_cache();
        for c in caches {
            self.check_cache(c)?;
            out.append(c);
        }
        if let Some(first) = caches.first() {
            out.set_base_position(first.base_position());
        }
        Ok(out)
    }

    /// Greedy continuation. `first_logits` are the logits after the prompt;
    /// the token chosen from them is fed back at `next_position`.
    pub fn generate_greedy(
        &self,
        mut cache: KvCache,
        first_logits: &[f32],
        next_position: usize,
        max_new_tokens: usize,
    ) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(max_new_tokens);
        if max_new_tokens == 0 {
            return Ok(out);
        }
        let mut token = argmax(first_logits);
        out.push(token);
        let mut pos = next_position;
        while out.len() < max_new_tokens {
            let (next, logits) = self.decode_step(&cache, token, pos)?;
            cache = next;
            pos += 1;
            token = argmax(&logits);
            out.push(token);
        }
        Ok(out)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&token) => Err(ModelError::TokenOutOfRange { token, vocab_size: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    fn check_cache(&self, cache: &KvCache) -> Result<()> {
        if cache.config_hash() != self.config_hash {
            return Err(ModelError::Incompatible { expected: self.config_hash, found: cache.config_hash() });
        }
        let c = &self.config;
        if cache.n_layers() != c.n_layers || cache.n_heads() != c.n_heads || cache.head_dim() != c.head_dim {
            return Err(ModelError::Shape(format!(
                "cache is [{}][..][{}][{}], model expects [{}][..][{}][{}]",
                cache.n_layers(),
                cache.n_heads(),
                cache.head_dim(),
                c.n_layers,
                c.n_heads,
                c.head_dim
            )));
        }
        Ok(())
    }
}

/// Index of the largest logit; ties go to the lowest token id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}
