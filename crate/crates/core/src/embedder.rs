//! Text-to-vector embedding.
//!
//! Two implementations sit behind the [`Embedder`] trait: a remote client for
//! JSON-over-HTTP embedding services, and [`LocalHashEmbedder`], a
//! deterministic character-trigram hasher used for offline runs and tests.

use std::sync::{Arc, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default dimensionality of the local-hash embedder.
pub const DEFAULT_LOCAL_DIM: usize = 256;
/// Smallest dimensionality accepted for the local-hash embedder.
pub const MIN_LOCAL_DIM: usize = 16;

const HASH_SEED: u64 = 0x5eed_d157_111a_6000;
const BOUNDARY: char = '\u{2}';

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("text to embed is empty")]
    EmptyText { index: Option<usize> },
    #[error("embedding service unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, EmbedError>;

/// A unit-length embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `values` to unit length. Returns `None` for the zero vector
    /// or non-finite input.
    pub fn normalized(values: Vec<f64>) -> Option<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return None;
        }
        Some(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values that are already unit length (used when loading a cache).
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Dot product; equals cosine similarity for unit vectors.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.0.iter().zip(other.0.iter()) {
            acc += a * b;
        }
        acc
    }
}

pub trait Embedder: Send + Sync {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                self.embed_text(t).map_err(|e| match e {
                    EmbedError::EmptyText { .. } => EmbedError::EmptyText { index: Some(i) },
                    other => other,
                })
            })
            .collect()
    }

    /// Stable identifier of the embedding configuration, used to key caches.
    fn fingerprint(&self) -> String;
}

fn check_non_empty(text: &str, index: Option<usize>) -> Result<()> {
    if text.trim().is_empty() {
        Err(EmbedError::EmptyText { index })
    } else {
        Ok(())
    }
}

/// Deterministic character-trigram hashing embedder.
///
/// Text is lowercased with whitespace runs collapsed, padded with a boundary
/// character at both ends, split into code-point trigrams, and each trigram is
/// hashed into one of `dim` buckets. The count vector is L2-normalized.
#[derive(Debug, Clone)]
pub struct LocalHashEmbedder {
    dim: usize,
}

impl LocalHashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < MIN_LOCAL_DIM {
            return Err(EmbedError::InvalidConfig(format!(
                "local-hash dim must be >= {MIN_LOCAL_DIM}, got {dim}"
            )));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn bucket(&self, trigram: &[char; 3]) -> usize {
        let mut buf = [0u8; 12];
        let mut len = 0;
        for c in trigram {
            len += c.encode_utf8(&mut buf[len..]).len();
        }
        (seeded_hash(&buf[..len]) % self.dim as u64) as usize
    }
}

/// FNV-1a over the bytes with a seeded offset basis, followed by a
/// splitmix64 finalizer. Platform independent.
fn seeded_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ HASH_SEED;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

impl Embedder for LocalHashEmbedder {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        check_non_empty(text, None)?;
        let mut chars = vec![BOUNDARY];
        let mut last_space = false;
        for c in text.trim().chars().flat_map(char::to_lowercase) {
            if c.is_whitespace() {
                if !last_space {
                    chars.push(' ');
                }
                last_space = true;
            } else {
                chars.push(c);
                last_space = false;
            }
        }
        chars.push(BOUNDARY);

        let mut counts = vec![0.0f64; self.dim];
        for w in chars.windows(3) {
            let tri = [w[0], w[1], w[2]];
            counts[self.bucket(&tri)] += 1.0;
        }
        // A non-empty trimmed text has at least one code point, so the padded
        // sequence has at least one trigram.
        Ok(EmbeddingVector::normalized(counts).expect("at least one trigram"))
    }

    fn fingerprint(&self) -> String {
        format!("local-hash/v1/dim={}/seed={HASH_SEED:x}", self.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    Remote,
    LocalHash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model_name: String,
    /// Local-hash: vector size. Remote: expected size, if known.
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_timeout_secs() -> f64 {
    30.0
}

fn default_retries() -> u32 {
    2
}

fn default_batch_size() -> usize {
    64
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self::local_hash(DEFAULT_LOCAL_DIM)
    }
}

impl EmbedderConfig {
    pub fn local_hash(dim: usize) -> Self {
        Self {
            kind: EmbedderKind::LocalHash,
            endpoint: String::new(),
            model_name: String::new(),
            dim: Some(dim),
            api_key: None,
            timeout_secs: default_timeout_secs(),
            retries: default_retries(),
            batch_size: default_batch_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            EmbedderKind::Remote if self.endpoint.trim().is_empty() => Err(
                EmbedError::InvalidConfig("remote embedder requires an endpoint".into()),
            ),
            EmbedderKind::LocalHash if self.dim.unwrap_or(DEFAULT_LOCAL_DIM) < MIN_LOCAL_DIM => {
                Err(EmbedError::InvalidConfig(format!(
                    "local-hash dim must be >= {MIN_LOCAL_DIM}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Embedder>> {
        self.validate()?;
        Ok(match self.kind {
            EmbedderKind::LocalHash => {
                Arc::new(LocalHashEmbedder::new(self.dim.unwrap_or(DEFAULT_LOCAL_DIM))?)
            }
            EmbedderKind::Remote => Arc::new(RemoteEmbedder::new(self.clone())?),
        })
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

/// Client for a remote embeddings endpoint.
///
/// The blocking client is `Sync`; concurrent callers each get their own
/// in-flight request.
pub struct RemoteEmbedder {
    config: EmbedderConfig,
    http: reqwest::blocking::Client,
    observed_dim: OnceLock<usize>,
}

impl RemoteEmbedder {
    pub fn new(config: EmbedderConfig) -> Result<Self> {
        config.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs.max(0.001)))
            .build()
            .map_err(|e| EmbedError::RemoteUnavailable(e.to_string()))?;
        Ok(Self {
            config,
            http,
            observed_dim: OnceLock::new(),
        })
    }

    fn request(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let body = EmbeddingRequest {
            model: &self.config.model_name,
            input: texts,
        };
        let mut last_err = String::new();
        for _ in 0..=self.config.retries {
            let mut req = self.http.post(&self.config.endpoint).json(&body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    let parsed: EmbeddingResponse = resp
                        .json()
                        .map_err(|e| EmbedError::RemoteUnavailable(format!("bad response: {e}")))?;
                    return self.collect(parsed, texts.len());
                }
                Ok(resp) if resp.status().is_server_error() => {
                    last_err = format!("HTTP {}", resp.status());
                }
                Ok(resp) => {
                    return Err(EmbedError::RemoteUnavailable(format!(
                        "HTTP {}",
                        resp.status()
                    )))
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(EmbedError::RemoteUnavailable(last_err))
    }

    fn collect(&self, parsed: EmbeddingResponse, expected: usize) -> Result<Vec<EmbeddingVector>> {
        if parsed.data.len() != expected {
            return Err(EmbedError::RemoteUnavailable(format!(
                "expected {expected} embeddings, got {}",
                parsed.data.len()
            )));
        }
        let mut slots: Vec<Option<EmbeddingVector>> = vec![None; expected];
        for datum in parsed.data {
            let want = match self.config.dim {
                Some(d) => d,
                None => *self.observed_dim.get_or_init(|| datum.embedding.len()),
            };
            if datum.embedding.len() != want {
                return Err(EmbedError::DimensionMismatch {
                    expected: want,
                    actual: datum.embedding.len(),
                });
            }
            let slot = slots.get_mut(datum.index).ok_or_else(|| {
                EmbedError::RemoteUnavailable(format!("response index {} out of range", datum.index))
            })?;
            *slot = Some(EmbeddingVector::normalized(datum.embedding).ok_or_else(|| {
                EmbedError::RemoteUnavailable("service returned a zero vector".into())
            })?);
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| EmbedError::RemoteUnavailable(format!("missing embedding {i}")))
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        check_non_empty(text, None)?;
        let mut out = self.request(&[text.to_string()])?;
        Ok(out.remove(0))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        for (i, t) in texts.iter().enumerate() {
            check_non_empty(t, Some(i))?;
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.config.batch_size.max(1)) {
            out.extend(self.request(chunk)?);
        }
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.endpoint.as_bytes());
        h.update([0]);
        h.update(self.config.model_name.as_bytes());
        format!("remote/{}", hex::encode(&h.finalize()[..8]))
    }
}
