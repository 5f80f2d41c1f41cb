//! Title and preference text encoding with a persistent vector cache.
//!
//! Cache layout, one directory per encoder namespace:
//!
//! ```text
//! <cache_dir>/<namespace>/index.json   {"namespace", "dim", "entries": {sha256(text) hex: row}}
//! <cache_dir>/<namespace>/vectors.bin  row-major little-endian f64, `dim` values per row
//! ```
//!
//! Rows are appended under a single writer lock; the index is rewritten
//! atomically on [`EmbeddingCache::flush`].

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::ItemCatalog;
use crate::tensor::{dot, Matrix};

/// Environment variable naming an HTTP embedding endpoint for [`RemoteEncoder`].
pub const ENCODER_ENDPOINT_ENV: &str = "LANE_ENCODER_ENDPOINT";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("failed to encode item {item_id} ({title:?}): {message}")]
    Item { item_id: String, title: String, message: String },
    #[error("failed to encode text: {0}")]
    Encode(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("encoder returned {got} dimensions, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding cache {path}: {message}")]
    Cache { path: String, message: String },
}

pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn deterministic(&self) -> bool {
        true
    }

    /// Identifies cached vectors; must change whenever outputs would change.
    fn cache_namespace(&self) -> String {
        format!("{}-d{}", self.name(), self.dim())
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, EncoderError>;
}

/// Deterministic stand-in for a sentence encoder.
///
/// The vector for `text` is `normalize(z)` where `z` holds `dim` standard
/// normal draws from a ChaCha8 stream seeded with
/// `SHA-256(seed as u64 little-endian || text bytes)`. Identical text always
/// maps to the identical unit vector on every platform.
#[derive(Debug, Clone)]
pub struct MockEncoder {
    dim: usize,
    seed: u64,
}

impl MockEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "encoder dimension must be positive");
        Self { dim, seed }
    }
}

impl TextEncoder for MockEncoder {
    fn name(&self) -> &str {
        "mock"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn cache_namespace(&self) -> String {
        format!("mock-d{}-s{}", self.dim, self.seed)
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Adapter for a pretrained sentence encoder served over HTTP.
///
/// Sends `{"model": <model>, "input": [<text>]}` and accepts either an
/// OpenAI-style `{"data": [{"embedding": [...]}]}` or `{"embeddings": [[...]]}`.
pub struct RemoteEncoder {
    endpoint: String,
    model: String,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl RemoteEncoder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, dim: usize, timeout: Duration) -> Result<Self, EncoderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EncoderError::Encode(e.to_string()))?;
        Ok(Self { endpoint: endpoint.into(), model: model.into(), dim, client })
    }

    /// Uses the endpoint in [`ENCODER_ENDPOINT_ENV`].
    pub fn from_env(model: impl Into<String>, dim: usize, timeout: Duration) -> Result<Self, EncoderError> {
        let endpoint = std::env::var(ENCODER_ENDPOINT_ENV)
            .map_err(|_| EncoderError::Validation(format!("{ENCODER_ENDPOINT_ENV} is not set")))?;
        Self::new(endpoint, model, dim, timeout)
    }
}

#[derive(Deserialize)]
struct RemoteData {
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct RemoteResponse {
    data: Option<Vec<RemoteData>>,
    embeddings: Option<Vec<Vec<f64>>>,
}

impl TextEncoder for RemoteEncoder {
    fn name(&self) -> &str {
        &self.model
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        let body = serde_json::json!({ "model": self.model, "input": [text] });
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| EncoderError::Encode(e.to_string()))?;
        let parsed: RemoteResponse = resp.json().map_err(|e| EncoderError::Encode(e.to_string()))?;
        let v = parsed
            .data
            .and_then(|d| d.into_iter().next().map(|d| d.embedding))
            .or_else(|| parsed.embeddings.and_then(|e| e.into_iter().next()))
            .ok_or_else(|| EncoderError::Encode("response carries no embedding".into()))?;
        if v.len() != self.dim {
            return Err(EncoderError::Dimension { expected: self.dim, got: v.len() });
        }
        Ok(v)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheIndex {
    namespace: String,
    dim: usize,
    entries: HashMap<String, usize>,
}

struct CacheState {
    rows: HashMap<String, usize>,
    vectors: Vec<Vec<f64>>,
    dirty: bool,
}

/// On-disk vector cache for one encoder namespace. Many readers, one writer.
pub struct EmbeddingCache {
    dir: PathBuf,
    namespace: String,
    dim: usize,
    state: RwLock<CacheState>,
    writer: Mutex<()>,
}

impl EmbeddingCache {
    pub fn open(cache_dir: &Path, namespace: &str, dim: usize) -> Result<Self, EncoderError> {
        let dir = cache_dir.join(sanitize(namespace));
        let cache_err = |message: String| EncoderError::Cache { path: dir.display().to_string(), message };
        fs::create_dir_all(&dir).map_err(|e| cache_err(e.to_string()))?;
        let index_path = dir.join("index.json");
        let mut state = CacheState { rows: HashMap::new(), vectors: Vec::new(), dirty: false };
        if index_path.exists() {
            let index: CacheIndex = serde_json::from_slice(&fs::read(&index_path).map_err(|e| cache_err(e.to_string()))?)
                .map_err(|e| cache_err(e.to_string()))?;
            if index.dim != dim || index.namespace != namespace {
                return Err(cache_err(format!("cache holds {}/d={} but {namespace}/d={dim} was requested", index.namespace, index.dim)));
            }
            let mut bytes = Vec::new();
            File::open(dir.join("vectors.bin"))
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| cache_err(e.to_string()))?;
            let row_bytes = dim * 8;
            let stored = bytes.len() / row_bytes;
            state.vectors = (0..stored)
                .map(|r| {
                    bytes[r * row_bytes..(r + 1) * row_bytes]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect()
                })
                .collect();
            // Rows appended after the last index flush are unreachable and get overwritten.
            state.rows = index.entries.into_iter().filter(|&(_, r)| r < stored).collect();
            state.vectors.truncate(state.rows.values().max().map_or(0, |m| m + 1));
        }
        Ok(Self { dir, namespace: namespace.to_string(), dim, state: RwLock::new(state), writer: Mutex::new(()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.state.read().expect("cache lock").rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, text: &str) -> Option<Vec<f64>> {
        let key = text_hash(text);
        let st = self.state.read().expect("cache lock");
        st.rows.get(&key).map(|&r| st.vectors[r].clone())
    }

    pub fn put(&self, text: &str, vector: &[f64]) -> Result<(), EncoderError> {
        assert_eq!(vector.len(), self.dim);
        let _w = self.writer.lock().expect("cache writer lock");
        let key = text_hash(text);
        if self.state.read().expect("cache lock").rows.contains_key(&key) {
            return Ok(());
        }
        let mut st = self.state.write().expect("cache lock");
        let row = st.vectors.len();
        let path = self.dir.join("vectors.bin");
        let mut f = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(false)
            .open(&path)
            .map_err(|e| EncoderError::Cache { path: path.display().to_string(), message: e.to_string() })?;
        let offset = (row * self.dim * 8) as u64;
        f.set_len(offset).and_then(|_| {
            use std::io::Seek;
            f.seek(std::io::SeekFrom::Start(offset))?;
            let bytes: Vec<u8> = vector.iter().flat_map(|v| v.to_le_bytes()).collect();
            f.write_all(&bytes)
        })
        .map_err(|e| EncoderError::Cache { path: path.display().to_string(), message: e.to_string() })?;
        st.vectors.push(vector.to_vec());
        st.rows.insert(key, row);
        st.dirty = true;
        Ok(())
    }

    /// Persists the index. A no-op when nothing changed.
    pub fn flush(&self) -> Result<(), EncoderError> {
        let _w = self.writer.lock().expect("cache writer lock");
        let mut st = self.state.write().expect("cache lock");
        if !st.dirty {
            return Ok(());
        }
        let index = CacheIndex { namespace: self.namespace.clone(), dim: self.dim, entries: st.rows.clone() };
        let tmp = self.dir.join("index.json.tmp");
        let cache_err = |e: std::io::Error| EncoderError::Cache { path: tmp.display().to_string(), message: e.to_string() };
        fs::write(&tmp, serde_json::to_vec(&index).expect("serializable index")).map_err(cache_err)?;
        fs::rename(&tmp, self.dir.join("index.json")).map_err(cache_err)?;
        st.dirty = false;
        Ok(())
    }
}

fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}

/// An encoder plus an optional cache.
#[derive(Clone)]
pub struct EncoderHandle {
    encoder: Arc<dyn TextEncoder>,
    cache: Option<Arc<EmbeddingCache>>,
}

impl EncoderHandle {
    pub fn new(encoder: Arc<dyn TextEncoder>) -> Self {
        Self { encoder, cache: None }
    }

    pub fn with_cache_dir(encoder: Arc<dyn TextEncoder>, cache_dir: &Path) -> Result<Self, EncoderError> {
        let cache = EmbeddingCache::open(cache_dir, &encoder.cache_namespace(), encoder.dim())?;
        Ok(Self { encoder, cache: Some(Arc::new(cache)) })
    }

    pub fn mock(dim: usize, seed: u64) -> Self {
        Self::new(Arc::new(MockEncoder::new(dim, seed)))
    }

    pub fn name(&self) -> &str {
        self.encoder.name()
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn deterministic(&self) -> bool {
        self.encoder.deterministic()
    }

    pub fn cache(&self) -> Option<&EmbeddingCache> {
        self.cache.as_deref()
    }

    pub fn encode_one(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        if let Some(v) = self.cache.as_ref().and_then(|c| c.get(text)) {
            return Ok(v);
        }
        let v = self.encoder.encode(text)?;
        if v.len() != self.dim() {
            return Err(EncoderError::Dimension { expected: self.dim(), got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EncoderError::Encode("non-finite embedding".into()));
        }
        if let Some(c) = &self.cache {
            c.put(text, &v)?;
        }
        Ok(v)
    }

    fn flush(&self) -> Result<(), EncoderError> {
        self.cache.as_ref().map_or(Ok(()), |c| c.flush())
    }
}

/// `(|I| + 1) × d` title embeddings; row 0 is the all-zero padding row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Matrix,
}

impl EmbeddingMatrix {
    /// Panics if row 0 is not exactly zero.
    pub fn from_matrix(values: Matrix) -> Self {
        assert!(values.rows() >= 1 && values.row(0).iter().all(|&v| v == 0.0), "row 0 must be the zero pad row");
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn item_count(&self) -> usize {
        self.values.rows() - 1
    }

    pub fn row(&self, item_index: usize) -> &[f64] {
        self.values.row(item_index)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_matrix(self) -> Matrix {
        self.values
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (x, y) = (self.row(a), self.row(b));
        dot(x, y) / (dot(x, x).sqrt() * dot(y, y).sqrt())
    }
}

/// Encodes every catalog title; row `k` holds item `k`.
pub fn encode_titles(catalog: &ItemCatalog, encoder: &EncoderHandle) -> Result<EmbeddingMatrix, EncoderError> {
    if catalog.is_empty() {
        return Err(EncoderError::Validation("catalog is empty".into()));
    }
    let rows: Vec<Vec<f64>> = catalog
        .items()
        .par_iter()
        .map(|item| {
            encoder.encode_one(&item.title).map_err(|e| EncoderError::Item {
                item_id: item.item_id.clone(),
                title: item.title.clone(),
                message: e.to_string(),
            })
        })
        .collect::<Result<_, _>>()?;
    encoder.flush()?;
    let mut values = Matrix::zeros(catalog.len() + 1, encoder.dim());
    for (k, r) in rows.iter().enumerate() {
        values.row_mut(k + 1).copy_from_slice(r);
    }
    Ok(EmbeddingMatrix { values })
}

/// Encodes `texts` into an `m × d` matrix, row `i` for `texts[i]`.
pub fn encode_texts<S: AsRef<str> + Sync>(texts: &[S], encoder: &EncoderHandle) -> Result<Matrix, EncoderError> {
    if texts.is_empty() {
        return Err(EncoderError::Validation("no texts to encode".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.as_ref().trim().is_empty()) {
        return Err(EncoderError::Validation(format!("text {i} is blank")));
    }
    let rows: Vec<Vec<f64>> = texts.par_iter().map(|t| encoder.encode_one(t.as_ref())).collect::<Result<_, _>>()?;
    encoder.flush()?;
    Ok(Matrix::from_rows(&rows))
}
