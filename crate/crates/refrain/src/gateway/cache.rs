//! Disk cache for completions and embeddings, keyed by a content hash of
//! (endpoint, params, prompt). Reads and writes are best-effort: an
//! unreadable entry is a miss, a failed write is dropped.

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelEndpoint;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CachedCompletion {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub estimated: bool,
}

#[derive(Debug)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(DiskCache { dir })
    }

    fn path(&self, key: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{key}.{ext}"))
    }

    pub fn get_completion(&self, key: &str) -> Option<CachedCompletion> {
        let text = fs::read_to_string(self.path(key, "json")).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn put_completion(&self, key: &str, value: &CachedCompletion) {
        if let Ok(body) = serde_json::to_string(value) {
            let _ = fs::write(self.path(key, "json"), body);
        }
    }

    pub fn get_embedding(&self, key: &str) -> Option<Vec<f64>> {
        let text = fs::read_to_string(self.path(key, "emb.json")).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn put_embedding(&self, key: &str, value: &[f64]) {
        if let Ok(body) = serde_json::to_string(value) {
            let _ = fs::write(self.path(key, "emb.json"), body);
        }
    }
}

/// Cache key for a completion request. The retry attempt participates so that
/// re-requests after a malformed reply are not answered from cache.
pub fn completion_key(endpoint: &ModelEndpoint, prompt: &str, attempt: u32) -> String {
    let mut hasher = Sha256::new();
    hasher.update(endpoint.name.as_bytes());
    hasher.update([0]);
    hasher.update(endpoint.model_id.as_bytes());
    hasher.update([0]);
    hasher.update(endpoint.params.temperature.to_bits().to_le_bytes());
    hasher.update(endpoint.params.max_tokens.to_le_bytes());
    hasher.update(attempt.to_le_bytes());
    hasher.update([0]);
    hasher.update(prompt.as_bytes());
    hex(&hasher.finalize())
}

/// Cache key for an embedding request.
pub fn embedding_key(endpoint: &ModelEndpoint, text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(endpoint.name.as_bytes());
    hasher.update([0]);
    hasher.update(endpoint.model_id.as_bytes());
    hasher.update([0]);
    hasher.update(text.as_bytes());
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
