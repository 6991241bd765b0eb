//! Text embeddings: a deterministic local hashed embedding and a client for a
//! remote embedding service, plus cosine similarity.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::{self, HttpFailure};
use crate::retry::{Attempt, RetryPolicy};

pub const MIN_DIMENSION: usize = 8;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding dimension {0} is below the minimum of {MIN_DIMENSION}")]
    InvalidDimension(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero vector")]
    ZeroVector,
    #[error("embedding service rejected credentials: {0}")]
    Auth(String),
    #[error("embedding service unavailable after {attempts} attempts: {message}")]
    RemoteUnavailable { attempts: u32, message: String },
    #[error("embedding service protocol error: {0}")]
    Protocol(String),
    #[error("missing environment variable {0}")]
    MissingEnv(&'static str),
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        EmbeddingVector { values, norm }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        EmbeddingVector::new(self.values.iter().map(|v| v * alpha).collect())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dimension() != b.dimension() {
        return Err(EmbedError::DimensionMismatch(a.dimension(), b.dimension()));
    }
    if a.norm == 0.0 || b.norm == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot(&a.values, &b.values) / (a.norm * b.norm)).clamp(-1.0, 1.0))
}

pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier, used in cache keys and index headers.
    fn id(&self) -> String;

    fn dimension(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }
}

/// Character-trigram feature hashing. Trigrams are taken over the text
/// wrapped in `^`/`$`; each is hashed with FNV-1a, bit 0 picks the sign and
/// the remaining bits pick the bucket. The result is L2-normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalHashed {
    dimension: usize,
}

impl LocalHashed {
    pub fn new(dimension: usize) -> Result<Self, EmbedError> {
        if dimension < MIN_DIMENSION {
            return Err(EmbedError::InvalidDimension(dimension));
        }
        Ok(LocalHashed { dimension })
    }
}

impl EmbeddingProvider for LocalHashed {
    fn id(&self) -> String {
        format!("local-hashed-{}", self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let padded: Vec<char> = std::iter::once('^').chain(text.chars()).chain(Some('$')).collect();
        let d = self.dimension as u64;
        let mut values = vec![0.0; self.dimension];
        let mut buf = [0u8; 12];
        for tri in padded.windows(3) {
            let mut len = 0;
            for c in tri {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let h = fnv1a64(&buf[..len]);
            let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
            values[((h >> 1) % d) as usize] += sign;
        }
        let mut v = EmbeddingVector::new(values);
        if v.norm == 0.0 {
            // every trigram cancelled out; fall back to a whole-text feature
            let mut values = vec![0.0; self.dimension];
            values[((fnv1a64(text.as_bytes()) >> 1) % d) as usize] = 1.0;
            v = EmbeddingVector::new(values);
        }
        let norm = v.norm;
        Ok(EmbeddingVector::new(v.values.into_iter().map(|x| x / norm).collect()))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub dimension: usize,
    pub cache_dir: Option<PathBuf>,
    pub retry: RetryPolicy,
    pub timeout: Duration,
    pub batch_size: usize,
}

impl RemoteConfig {
    /// Reads `EMBED_ENDPOINT` and `EMBED_API_KEY`.
    pub fn from_env(model: &str, dimension: usize, cache_dir: Option<PathBuf>) -> Result<Self, EmbedError> {
        let endpoint =
            std::env::var("EMBED_ENDPOINT").map_err(|_| EmbedError::MissingEnv("EMBED_ENDPOINT"))?;
        Ok(RemoteConfig {
            endpoint,
            api_key: std::env::var("EMBED_API_KEY").ok(),
            model: model.to_string(),
            dimension,
            cache_dir,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(60),
            batch_size: 64,
        })
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for a remote embedding service with an in-memory and on-disk cache.
pub struct RemoteEmbedder {
    config: RemoteConfig,
    agent: ureq::Agent,
    memo: Mutex<HashMap<String, EmbeddingVector>>,
    disk_lock: Mutex<()>,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteConfig) -> Result<Self, EmbedError> {
        if config.dimension < MIN_DIMENSION {
            return Err(EmbedError::InvalidDimension(config.dimension));
        }
        if let Some(dir) = &config.cache_dir {
            fs::create_dir_all(dir).map_err(|e| EmbedError::Protocol(format!("cache dir: {e}")))?;
        }
        let agent = http::agent(config.timeout);
        Ok(RemoteEmbedder { config, agent, memo: Mutex::new(HashMap::new()), disk_lock: Mutex::new(()) })
    }

    fn cache_key(&self, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.id().as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        hex_digest(h)
    }

    fn cached(&self, key: &str) -> Option<EmbeddingVector> {
        if let Some(v) = self.memo.lock().unwrap().get(key) {
            return Some(v.clone());
        }
        let dir = self.config.cache_dir.as_ref()?;
        let bytes = fs::read(dir.join(format!("{key}.json"))).ok()?;
        let values: Vec<f64> = serde_json::from_slice(&bytes).ok()?;
        (values.len() == self.config.dimension).then(|| EmbeddingVector::new(values))
    }

    fn store(&self, key: String, v: &EmbeddingVector) {
        if let Some(dir) = &self.config.cache_dir {
            let _guard = self.disk_lock.lock().unwrap();
            let tmp = dir.join(format!("{key}.tmp"));
            let dest = dir.join(format!("{key}.json"));
            let written = serde_json::to_vec(v.values())
                .map_err(std::io::Error::from)
                .and_then(|bytes| fs::write(&tmp, bytes))
                .and_then(|_| fs::rename(&tmp, &dest));
            if let Err(e) = written {
                log::warn!("could not persist embedding cache entry: {e}");
            }
        }
        self.memo.lock().unwrap().insert(key, v.clone());
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let body = EmbedRequest { model: &self.config.model, input: texts };
        let (result, attempts) = self.config.retry.run(|_| {
            http::post_json::<_, EmbedResponse>(
                &self.agent,
                &self.config.endpoint,
                self.config.api_key.as_deref(),
                &body,
            )
            .map_err(|f| match f {
                HttpFailure::Transient(message) => {
                    Attempt::Transient(EmbedError::RemoteUnavailable { attempts: 0, message })
                }
                HttpFailure::Auth(m) => Attempt::Fatal(EmbedError::Auth(m)),
                HttpFailure::Permanent(m) => Attempt::Fatal(EmbedError::Protocol(m)),
            })
        });
        let resp = result.map_err(|e| match e {
            EmbedError::RemoteUnavailable { message, .. } => {
                EmbedError::RemoteUnavailable { attempts, message }
            }
            other => other,
        })?;
        if resp.vectors.len() != texts.len() {
            return Err(EmbedError::Protocol(format!(
                "expected {} vectors, got {}",
                texts.len(),
                resp.vectors.len()
            )));
        }
        resp.vectors
            .into_iter()
            .map(|values| {
                if values.len() != self.config.dimension {
                    Err(EmbedError::DimensionMismatch(values.len(), self.config.dimension))
                } else {
                    Ok(EmbeddingVector::new(values))
                }
            })
            .collect()
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote-{}-{}", self.config.model, self.config.dimension)
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        let keys: Vec<String> = texts.iter().map(|t| self.cache_key(t)).collect();
        let mut out: Vec<Option<EmbeddingVector>> = keys.iter().map(|k| self.cached(k)).collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        for chunk in missing.chunks(self.config.batch_size.max(1)) {
            let batch: Vec<&str> = chunk.iter().map(|&i| texts[i]).collect();
            for (&i, v) in chunk.iter().zip(self.request(&batch)?) {
                self.store(keys[i].clone(), &v);
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled above")).collect())
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_digest(h)
}

/// Provider selection as it appears in run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    LocalHashed {
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
    Remote {
        model: String,
        dimension: usize,
        #[serde(default)]
        cache_dir: Option<PathBuf>,
    },
}

fn default_dimension() -> usize {
    256
}

impl Default for ProviderSpec {
    fn default() -> Self {
        ProviderSpec::LocalHashed { dimension: default_dimension() }
    }
}

impl ProviderSpec {
    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>, EmbedError> {
        Ok(match self {
            ProviderSpec::LocalHashed { dimension } => Arc::new(LocalHashed::new(*dimension)?),
            ProviderSpec::Remote { model, dimension, cache_dir } => Arc::new(RemoteEmbedder::new(
                RemoteConfig::from_env(model, *dimension, cache_dir.clone())?,
            )?),
        })
    }
}
