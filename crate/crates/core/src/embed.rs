//! Batched HTTP embedding client with a content-addressed disk cache.
//!
//! Wire format: `POST {"modality": "image"|"text", "inputs": [...]}` with
//! images sent as base64 file bytes and text sent verbatim; the endpoint
//! answers `{"embeddings": [[...], ...]}` aligned with `inputs`.
//!
//! Cache layout: one archive per item, `<cache>/<key>.st`, where
//! `key = sha256(endpoint digest ‖ content digest)`. Each archive holds a
//! single `embedding` tensor and records its payload checksum in the
//! metadata; entries whose checksum does not verify are fetched again.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveBuilder, TensorArchive};
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::preference::{EmbeddingTable, Modality};

pub const URL_ENV: &str = "W2W_EMBED_URL";
pub const TOKEN_ENV: &str = "W2W_EMBED_TOKEN";

const CACHE_TENSOR: &str = "embedding";

/// Sends one request body and returns the raw response body.
pub trait Transport: Sync {
    fn post(&self, endpoint: &str, token: Option<&str>, body: &[u8]) -> std::result::Result<Vec<u8>, String>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for HttpTransport {
    fn post(&self, endpoint: &str, token: Option<&str>, body: &[u8]) -> std::result::Result<Vec<u8>, String> {
        let mut req = self.agent.post(endpoint).header("content-type", "application/json");
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        resp.body_mut()
            .with_config()
            .limit(1 << 30)
            .read_to_vec()
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Payload {
    File(PathBuf),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedItem {
    pub id: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles afterwards.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_ms: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedRequest {
    pub items: Vec<EmbedItem>,
    pub modality: Modality,
    pub endpoint: String,
    pub token: Option<String>,
    pub batch_size: usize,
    /// Batches in flight at once.
    pub concurrency: usize,
    pub retry: RetryPolicy,
    pub cache_dir: Option<PathBuf>,
}

impl EmbedRequest {
    /// Request with the endpoint and token taken from the environment.
    pub fn from_env(items: Vec<EmbedItem>, modality: Modality) -> Result<Self> {
        let endpoint = std::env::var(URL_ENV)
            .map_err(|_| Error::InvalidInput(format!("no endpoint given and `{URL_ENV}` is unset")))?;
        Ok(Self {
            items,
            modality,
            endpoint,
            token: std::env::var(TOKEN_ENV).ok(),
            batch_size: 32,
            concurrency: 4,
            retry: RetryPolicy::default(),
            cache_dir: None,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.concurrency == 0 {
            return Err(Error::InvalidInput(
                "batch size and concurrency must be at least 1".into(),
            ));
        }
        if self.retry.max_attempts == 0 {
            return Err(Error::InvalidInput("retry policy needs at least one attempt".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.items.iter().find(|i| !seen.insert(i.id.as_str())) {
            return Err(Error::InvalidInput(format!("duplicate item id `{}`", dup.id)));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    modality: Modality,
    inputs: Vec<&'a str>,
}

#[derive(Deserialize)]
struct WireResponse {
    embeddings: Vec<Vec<f32>>,
}

struct Prepared {
    id: String,
    input: String,
    cache_key: String,
}

fn prepare(item: &EmbedItem, modality: Modality, endpoint_digest: &str) -> Result<Prepared> {
    let (input, bytes) = match &item.payload {
        Payload::Text(t) => (t.clone(), t.as_bytes().to_vec()),
        Payload::File(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let input = match modality {
                Modality::Image => base64::engine::general_purpose::STANDARD.encode(&bytes),
                Modality::Text => String::from_utf8(bytes.clone())
                    .map_err(|_| Error::InvalidInput(format!("{} is not UTF-8 text", p.display())))?,
            };
            (input, bytes)
        }
    };
    let mut tagged = modality.to_string().into_bytes();
    tagged.push(0);
    tagged.extend_from_slice(&bytes);
    let content_digest = sha256_hex(&tagged);
    Ok(Prepared {
        id: item.id.clone(),
        input,
        cache_key: sha256_hex(format!("{endpoint_digest}{content_digest}").as_bytes()),
    })
}

fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.st"))
}

fn read_cached(dir: &Path, key: &str) -> Option<Vec<f32>> {
    let path = cache_path(dir, key);
    if !path.exists() {
        return None;
    }
    let verified = TensorArchive::read(&path).ok().and_then(|a| {
        let bytes = a.tensor_bytes(CACHE_TENSOR)?;
        let ok = a.metadata().get("checksum") == Some(&sha256_hex(bytes))
            && a.metadata().get("key").map(String::as_str) == Some(key);
        if ok {
            a.tensor_f32(CACHE_TENSOR).ok()
        } else {
            None
        }
    });
    if verified.is_none() {
        log::warn!("cache entry {} failed verification; refetching", path.display());
    }
    verified
}

fn write_cached(dir: &Path, key: &str, v: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    let mut b = ArchiveBuilder::new();
    b.insert_metadata("checksum", sha256_hex(&bytes));
    b.insert_metadata("key", key);
    b.add_f32(CACHE_TENSOR, vec![v.len()], v)?;
    b.build().write(cache_path(dir, key))
}

fn fetch_batch(
    transport: &dyn Transport,
    req: &EmbedRequest,
    index: usize,
    batch: &[&Prepared],
) -> Result<Vec<Vec<f32>>> {
    let body = serde_json::to_vec(&WireRequest {
        modality: req.modality,
        inputs: batch.iter().map(|p| p.input.as_str()).collect(),
    })?;
    let mut delay = req.retry.backoff_ms;
    let mut reason = String::new();
    for attempt in 1..=req.retry.max_attempts {
        let outcome = transport
            .post(&req.endpoint, req.token.as_deref(), &body)
            .and_then(|raw| serde_json::from_slice::<WireResponse>(&raw).map_err(|e| format!("bad response: {e}")))
            .and_then(|r| {
                if r.embeddings.len() == batch.len() {
                    Ok(r.embeddings)
                } else {
                    Err(format!(
                        "batch {index}: expected {} embeddings, got {}",
                        batch.len(),
                        r.embeddings.len()
                    ))
                }
            });
        match outcome {
            Ok(e) => return Ok(e),
            Err(e) => {
                log::warn!("batch {index} attempt {attempt}/{} failed: {e}", req.retry.max_attempts);
                reason = e;
            }
        }
        if attempt < req.retry.max_attempts && delay > 0 {
            std::thread::sleep(Duration::from_millis(delay));
            delay = delay.saturating_mul(2);
        }
    }
    Err(Error::Endpoint {
        failed_ids: batch.iter().map(|p| p.id.clone()).collect(),
        reason,
    })
}

/// Fetches (or loads from cache) one embedding per item and returns them
/// unit-normalised in id order.
pub fn fetch_embeddings(req: &EmbedRequest, transport: &dyn Transport) -> Result<EmbeddingTable> {
    req.validate()?;
    if let Some(dir) = &req.cache_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let endpoint_digest = sha256_hex(req.endpoint.as_bytes());
    let mut prepared = req
        .items
        .iter()
        .map(|i| prepare(i, req.modality, &endpoint_digest))
        .collect::<Result<Vec<_>>>()?;
    prepared.sort_by(|a, b| a.id.cmp(&b.id));

    let mut found: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut missing = Vec::new();
    for p in &prepared {
        match req.cache_dir.as_deref().and_then(|d| read_cached(d, &p.cache_key)) {
            Some(v) => {
                found.insert(p.id.clone(), v);
            }
            None => missing.push(p),
        }
    }

    let batches: Vec<&[&Prepared]> = missing.chunks(req.batch_size).collect();
    let mut results: Vec<Result<Vec<Vec<f32>>>> = Vec::with_capacity(batches.len());
    for (group_index, group) in batches.chunks(req.concurrency).enumerate() {
        let base = group_index * req.concurrency;
        let group_results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = group
                .iter()
                .enumerate()
                .map(|(i, batch)| s.spawn(move || fetch_batch(transport, req, base + i, batch)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("embedding worker panicked"))
                .collect()
        });
        results.extend(group_results);
    }

    let mut failed = Vec::new();
    let mut reasons = Vec::new();
    for (batch, result) in batches.iter().zip(results) {
        match result {
            Ok(vectors) => {
                for (p, v) in batch.iter().zip(vectors) {
                    if let Some(dir) = &req.cache_dir {
                        write_cached(dir, &p.cache_key, &v)?;
                    }
                    found.insert(p.id.clone(), v);
                }
            }
            Err(Error::Endpoint { failed_ids, reason }) => {
                failed.extend(failed_ids);
                reasons.push(reason);
            }
            Err(e) => return Err(e),
        }
    }
    if !failed.is_empty() {
        return Err(Error::Endpoint {
            failed_ids: failed,
            reason: reasons.join("; "),
        });
    }

    let mut table = EmbeddingTable::new(req.modality, req.endpoint.clone());
    let mut dim = None;
    for (id, v) in &found {
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(Error::DimensionDrift {
                    expected: d,
                    got: v.len(),
                })
            }
            _ => {}
        }
        table.insert(id.clone(), v)?;
    }
    Ok(table)
}
