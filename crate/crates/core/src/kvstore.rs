//! On-disk store of materialized KV caches, one `<chunk_id>.matkv` file per
//! chunk in a flat directory.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! offset size field
//!      0    6 magic "MATKV1"
//!      6    2 format_version (u16)
//!      8    8 config_hash (u64)
//!     16    4 n_layers (u32)
//!     20    4 n_heads (u32)
//!     24    4 head_dim (u32)
//!     28    4 n_tokens (u32)
//!     32    1 dtype_code (u8, 0 = f32)
//!     33    4 payload_checksum (CRC-32 of payload)
//!     37    4 header_checksum (CRC-32 of bytes 0..41 with this field zeroed)
//!     41    . keys   [n_layers][n_tokens][n_heads][head_dim] f32
//!      .    . values [n_layers][n_tokens][n_heads][head_dim] f32
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::KvCache;

pub const MAGIC: &[u8; 6] = b"MATKV1";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 41;
pub const DTYPE_F32: u8 = 0;
pub const FILE_EXTENSION: &str = "matkv";

const PAYLOAD_CRC_OFFSET: usize = 33;
const HEADER_CRC_OFFSET: usize = 37;

/// Identifier of a document chunk; also the file stem of its KV file.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ChunkId(String);

impl ChunkId {
    pub fn new(value: impl Into<String>) -> Result<Self, StoreError> {
        let value = value.into();
        let ok = (1..=64).contains(&value.len())
            && value.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-');
        if ok {
            Ok(Self(value))
        } else {
            Err(StoreError::InvalidId(value))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ChunkId {
    type Error = StoreError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<ChunkId> for String {
    fn from(id: ChunkId) -> Self {
        id.0
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Header,
    Payload,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Header => "header",
            Region::Payload => "payload",
        })
    }
}

/// Failure to decode a `.matkv` byte image.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("{region} checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { region: Region, stored: u32, computed: u32 },
    #[error("{0}")]
    Format(String),
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid chunk id {0:?}: expected [A-Za-z0-9_-]{{1,64}}")]
    InvalidId(String),
    #[error("no materialized kv cache for chunk {0}")]
    NotFound(ChunkId),
    #[error("kv file for chunk {id} is corrupt: {source}")]
    Corruption { id: ChunkId, source: DecodeError },
    #[error("kv file for chunk {id} is malformed: {source}")]
    Format { id: ChunkId, source: DecodeError },
    #[error("kv cache config {found:#018x} does not match store model {expected:#018x}")]
    Incompatible { expected: u64, found: u64 },
    #[error("invalid kv cache: {0}")]
    InvalidCache(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("failed to load {}", failed_ids(.0))]
    LoadMany(Vec<(ChunkId, StoreError)>),
    #[error("injected failure before rename of {0}")]
    Injected(PathBuf),
}

fn failed_ids(failures: &[(ChunkId, StoreError)]) -> String {
    failures
        .iter()
        .map(|(id, e)| format!("{id} ({e})"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl StoreError {
    pub fn is_not_found(&self) -> bool {
        matches!(self, StoreError::NotFound(_))
    }

    pub fn is_corruption(&self) -> bool {
        matches!(self, StoreError::Corruption { .. })
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvFileHeader {
    pub format_version: u16,
    pub config_hash: u64,
    pub n_layers: u32,
    pub n_heads: u32,
    pub head_dim: u32,
    pub n_tokens: u32,
    pub dtype_code: u8,
    pub payload_checksum: u32,
    pub header_checksum: u32,
}

impl KvFileHeader {
    pub fn payload_len(&self) -> u64 {
        2 * u64::from(self.n_layers) * u64::from(self.n_tokens) * u64::from(self.n_heads) * u64::from(self.head_dim) * 4
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..6].copy_from_slice(MAGIC);
        b[6..8].copy_from_slice(&self.format_version.to_le_bytes());
        b[8..16].copy_from_slice(&self.config_hash.to_le_bytes());
        b[16..20].copy_from_slice(&self.n_layers.to_le_bytes());
        b[20..24].copy_from_slice(&self.n_heads.to_le_bytes());
        b[24..28].copy_from_slice(&self.head_dim.to_le_bytes());
        b[28..32].copy_from_slice(&self.n_tokens.to_le_bytes());
        b[32] = self.dtype_code;
        b[PAYLOAD_CRC_OFFSET..HEADER_CRC_OFFSET].copy_from_slice(&self.payload_checksum.to_le_bytes());
        let crc = header_crc(&b);
        b[HEADER_CRC_OFFSET..HEADER_LEN].copy_from_slice(&crc.to_le_bytes());
        b
    }
}

fn header_crc(header: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&header[..HEADER_CRC_OFFSET]);
    h.update(&[0u8; 4]);
    h.finalize()
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

/// Serializes a cache into the `.matkv` byte image.
pub fn encode_cache(cache: &KvCache) -> Result<Vec<u8>> {
    validate_cache(cache)?;
    let dim = |v: usize, name: &str| u32::try_from(v).map_err(|_| StoreError::InvalidCache(format!("{name} exceeds u32")));
    let mut payload = Vec::with_capacity(cache.n_elements() * 4);
    for l in 0..cache.n_layers() {
        for v in cache.layer_keys(l) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    for l in 0..cache.n_layers() {
        for v in cache.layer_values(l) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = KvFileHeader {
        format_version: FORMAT_VERSION,
        config_hash: cache.config_hash(),
        n_layers: dim(cache.n_layers(), "n_layers")?,
        n_heads: dim(cache.n_heads(), "n_heads")?,
        head_dim: dim(cache.head_dim(), "head_dim")?,
        n_tokens: dim(cache.n_tokens(), "n_tokens")?,
        dtype_code: DTYPE_F32,
        payload_checksum: crc32fast::hash(&payload),
        header_checksum: 0,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses and verifies a `.matkv` byte image. The header checksum is checked
/// before any header field is trusted, so a flipped bit anywhere in the file
/// surfaces as [`DecodeError::Checksum`].
pub fn decode_cache(bytes: &[u8]) -> Result<(KvFileHeader, KvCache), DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Format(format!("file of {} bytes is shorter than the header", bytes.len())));
    }
    let h = &bytes[..HEADER_LEN];
    let stored = u32_at(h, HEADER_CRC_OFFSET);
    let computed = header_crc(h);
    if stored != computed {
        return Err(DecodeError::Checksum { region: Region::Header, stored, computed });
    }
    if &h[0..6] != MAGIC {
        return Err(DecodeError::Format("bad magic".into()));
    }
    let header = KvFileHeader {
        format_version: u16::from_le_bytes([h[6], h[7]]),
        config_hash: u64::from_le_bytes(h[8..16].try_into().unwrap()),
        n_layers: u32_at(h, 16),
        n_heads: u32_at(h, 20),
        head_dim: u32_at(h, 24),
        n_tokens: u32_at(h, 28),
        dtype_code: h[32],
        payload_checksum: u32_at(h, PAYLOAD_CRC_OFFSET),
        header_checksum: stored,
    };
    if header.format_version != FORMAT_VERSION {
        return Err(DecodeError::Format(format!("unsupported format version {}", header.format_version)));
    }
    if header.dtype_code != DTYPE_F32 {
        return Err(DecodeError::Format(format!("unsupported dtype code {}", header.dtype_code)));
    }
    if header.n_layers == 0 || header.n_heads == 0 || header.head_dim == 0 {
        return Err(DecodeError::Format("zero dimension in header".into()));
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != header.payload_len() {
        return Err(DecodeError::Format(format!(
            "header shape implies {} payload bytes, file has {}",
            header.payload_len(),
            payload.len()
        )));
    }
    let computed = crc32fast::hash(payload);
    if computed != header.payload_checksum {
        return Err(DecodeError::Checksum { region: Region::Payload, stored: header.payload_checksum, computed });
    }

    let n_layers = header.n_layers as usize;
    let layer_bytes = payload.len() / 2 / n_layers;
    let read_layers = |half: &[u8]| -> Vec<Vec<f32>> {
        half.chunks_exact(layer_bytes)
            .map(|layer| layer.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
            .collect()
    };
    let (kb, vb) = payload.split_at(payload.len() / 2);
    let (keys, values) = if layer_bytes == 0 {
        (vec![Vec::new(); n_layers], vec![Vec::new(); n_layers])
    } else {
        (read_layers(kb), read_layers(vb))
    };
    let cache = KvCache::from_layers(header.config_hash, header.n_heads as usize, header.head_dim as usize, 0, keys, values)
        .map_err(|e| DecodeError::Format(e.to_string()))?;
    Ok((header, cache))
}

fn validate_cache(cache: &KvCache) -> Result<()> {
    if cache.base_position() != 0 {
        return Err(StoreError::InvalidCache(format!(
            "materialized caches start at position 0, got base_position {}",
            cache.base_position()
        )));
    }
    if !cache.is_finite() {
        return Err(StoreError::InvalidCache("cache contains non-finite values".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoreReceipt {
    pub bytes_written: u64,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub files: u64,
    pub bytes: u64,
    pub per_chunk: BTreeMap<ChunkId, u64>,
}

/// Caches returned by [`KvStore::load_many`], in request order.
#[derive(Debug, Clone)]
pub struct LoadedBatch {
    pub caches: Vec<KvCache>,
    pub wall_time: Duration,
}

/// Directory of materialized KV caches, bound to one model configuration.
///
/// Loads may run concurrently from any number of threads. Stores and
/// deletes of the same id must be serialized by the caller.
#[derive(Debug)]
pub struct KvStore {
    root: PathBuf,
    config_hash: u64,
    tmp_seq: AtomicU64,
    fail_before_rename: AtomicBool,
}

impl KvStore {
    /// Opens (creating if needed) the store rooted at `root` for the model
    /// whose config hash is `config_hash`.
    pub fn open(root: impl Into<PathBuf>, config_hash: u64) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root, config_hash, tmp_seq: AtomicU64::new(0), fail_before_rename: AtomicBool::new(false) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    pub fn path_for(&self, id: &ChunkId) -> PathBuf {
        self.root.join(format!("{id}.{FILE_EXTENSION}"))
    }

    /// Test hook: when set, `store_kv` writes the temp file and then fails
    /// instead of renaming it into place.
    pub fn set_fail_before_rename(&self, on: bool) {
        self.fail_before_rename.store(on, Ordering::SeqCst);
    }

    pub fn contains(&self, id: &ChunkId) -> bool {
        self.path_for(id).is_file()
    }

    /// Writes `cache` as `<id>.matkv` via temp file + rename, replacing any
    /// previous version.
    pub fn store_kv(&self, id: &ChunkId, cache: &KvCache) -> Result<StoreReceipt> {
        let start = Instant::now();
        if cache.config_hash() != self.config_hash {
            return Err(StoreError::Incompatible { expected: self.config_hash, found: cache.config_hash() });
        }
        let bytes = encode_cache(cache)?;
        let seq = self.tmp_seq.fetch_add(1, Ordering::Relaxed);
        let tmp = self.root.join(format!(".{id}.{}.{seq}.tmp", std::process::id()));
        let result = (|| {
            let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(&bytes).map_err(io_err(&tmp))?;
            f.sync_data().map_err(io_err(&tmp))?;
            drop(f);
            if self.fail_before_rename.load(Ordering::SeqCst) {
                return Err(StoreError::Injected(tmp.clone()));
            }
            let dst = self.path_for(id);
            fs::rename(&tmp, &dst).map_err(io_err(&dst))
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result?;
        Ok(StoreReceipt { bytes_written: bytes.len() as u64, wall_time: start.elapsed() })
    }

    pub fn load_kv(&self, id: &ChunkId) -> Result<KvCache> {
        let path = self.path_for(id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NotFound(id.clone())),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let (header, cache) = decode_cache(&bytes).map_err(|source| match source {
            DecodeError::Checksum { .. } => StoreError::Corruption { id: id.clone(), source },
            DecodeError::Format(_) => StoreError::Format { id: id.clone(), source },
        })?;
        if header.config_hash != self.config_hash {
            return Err(StoreError::Incompatible { expected: self.config_hash, found: header.config_hash });
        }
        Ok(cache)
    }

    /// Loads `ids` with up to `parallelism` reads in flight. Results come back
    /// in request order; any failure yields [`StoreError::LoadMany`] listing
    /// every failing id.
    pub fn load_many(&self, ids: &[ChunkId], parallelism: usize) -> Result<LoadedBatch> {
        let start = Instant::now();
        let workers = parallelism.max(1).min(ids.len());
        let results: Vec<Result<KvCache>> = if workers <= 1 {
            ids.iter().map(|id| self.load_kv(id)).collect()
        } else {
            let next = AtomicUsize::new(0);
            let slots: Vec<Mutex<Option<Result<KvCache>>>> = ids.iter().map(|_| Mutex::new(None)).collect();
            std::thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= ids.len() {
                            break;
                        }
                        let r = self.load_kv(&ids[i]);
                        *slots[i].lock().unwrap() = Some(r);
                    });
                }
            });
            slots.into_iter().map(|m| m.into_inner().unwrap().expect("every slot filled")).collect()
        };

        let mut caches = Vec::with_capacity(ids.len());
        let mut failures = Vec::new();
        for (id, r) in ids.iter().zip(results) {
            match r {
                Ok(c) => caches.push(c),
                Err(e) => failures.push((id.clone(), e)),
            }
        }
        if !failures.is_empty() {
            return Err(StoreError::LoadMany(failures));
        }
        Ok(LoadedBatch { caches, wall_time: start.elapsed() })
    }

    /// Removes `<id>.matkv`. Returns whether a file was present.
    pub fn delete_kv(&self, id: &ChunkId) -> Result<bool> {
        let path = self.path_for(id);
        match fs::remove_file(&path) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Ids of every materialized chunk, ascending.
    pub fn list(&self) -> Result<Vec<ChunkId>> {
        Ok(self.stats()?.per_chunk.into_keys().collect())
    }

    pub fn stats(&self) -> Result<StoreStats> {
        let mut stats = StoreStats::default();
        for entry in fs::read_dir(&self.root).map_err(io_err(&self.root))? {
            let entry = entry.map_err(io_err(&self.root))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some(FILE_EXTENSION) {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| ChunkId::new(s).ok()) else {
                continue;
            };
            let meta = entry.metadata().map_err(io_err(&path))?;
            if !meta.is_file() {
                continue;
            }
            stats.files += 1;
            stats.bytes += meta.len();
            stats.per_chunk.insert(id, meta.len());
        }
        Ok(stats)
    }
}
