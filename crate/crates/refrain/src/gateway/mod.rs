//! Uniform access to the expert, amateur, and generation endpoints, plus a
//! deterministic scripted backend for offline runs.
//!
//! The [`Gateway`] wraps a [`Backend`] with retries (exponential backoff on
//! transient failures), an optional disk cache keyed by content hash, an
//! in-memory embedding cache, and a [`UsageLedger`]. Forked gateways share
//! the backend and caches but keep their own ledger, which is how per-case
//! usage slices are carved out of a benchmark run.

mod cache;
pub mod http;
mod ledger;
pub mod scripted;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{completion_key, embedding_key, CachedCompletion, DiskCache};
pub use http::HttpBackend;
pub use ledger::{EndpointUsage, LedgerSnapshot, UsageLedger, UsageTotals};
pub use scripted::{FailKind, PromptMatcher, ScriptReply, ScriptedBackend, ScriptedScores};

/// What an endpoint is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Expert,
    Amateur,
    /// Generates roots and children when it differs from the expert.
    Base,
    Judge,
    Embedder,
}

/// Sampling parameters sent with each completion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ModelParams {
    fn default() -> Self {
        // generation default; evaluation and filter calls override to 0
        ModelParams {
            temperature: 0.7,
            max_tokens: 1024,
        }
    }
}

/// One model endpoint: where to reach it and how to call it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub name: String,
    pub base_url: String,
    pub model_id: String,
    pub role: Role,
    pub params: ModelParams,
    /// Name of the environment variable holding the bearer token. Secrets are
    /// never stored inline.
    pub auth_env: Option<String>,
}

impl ModelEndpoint {
    pub fn new(name: impl Into<String>, role: Role) -> Self {
        ModelEndpoint {
            name: name.into(),
            base_url: String::new(),
            model_id: String::new(),
            role,
            params: ModelParams::default(),
            auth_env: None,
        }
    }

    pub fn with_base_url(mut self, base_url: impl Into<String>) -> Self {
        self.base_url = base_url.into();
        self
    }

    pub fn with_model(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn with_auth_env(mut self, var: impl Into<String>) -> Self {
        self.auth_env = Some(var.into());
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.params.max_tokens = max_tokens;
        self
    }

    /// A copy of this endpoint with a different sampling temperature (used to
    /// pin evaluation and filter calls to a deterministic temperature).
    pub fn with_temperature(&self, temperature: f64) -> Self {
        let mut ep = self.clone();
        ep.params.temperature = temperature;
        ep
    }
}

/// One completion: reply text plus usage accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResult {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub endpoint_name: String,
    pub latency: Duration,
    /// Token counts came from the local estimator, not provider usage fields.
    pub estimated: bool,
    /// Served from the response cache; recorded as zero-cost.
    pub cached: bool,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure on {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("authentication failed on {endpoint}: {message}")]
    AuthFailure { endpoint: String, message: String },
    #[error("rate limited by {endpoint}")]
    RateLimited { endpoint: String },
    #[error("prompt exceeds the context window of {endpoint}")]
    ContextOverflow { endpoint: String },
    #[error("script exhausted for role {role:?} on prompt {preview:?}")]
    ScriptExhausted { role: Role, preview: String },
    #[error("embedding dimension changed on {endpoint}: expected {expected}, got {got}")]
    DimensionMismatch {
        endpoint: String,
        expected: usize,
        got: usize,
    },
    #[error("endpoint {endpoint} misconfigured: {message}")]
    Config { endpoint: String, message: String },
}

impl GatewayError {
    /// Transient failures are worth a retry; everything else is not.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            GatewayError::Transport { .. } | GatewayError::RateLimited { .. }
        )
    }
}

/// A chat-completion and embedding provider.
pub trait Backend: Send + Sync {
    fn complete(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
    ) -> Result<CompletionResult, GatewayError>;

    fn embed(&self, endpoint: &ModelEndpoint, text: &str) -> Result<Vec<f64>, GatewayError>;
}

/// Estimate a token count from whitespace-separated words and punctuation
/// runs. Only used when the provider reports no usage (scripted runs, odd
/// providers); results are flagged `estimated`.
pub fn estimate_tokens(text: &str) -> u64 {
    let mut count = 0u64;
    let mut in_word = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            in_word = false;
        } else if ch.is_alphanumeric() {
            if !in_word {
                count += 1;
                in_word = true;
            }
        } else {
            count += 1;
            in_word = false;
        }
    }
    count
}

/// Retry schedule for transient failures: `base_delay * 2^attempt`.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            max_retries: 0,
            base_delay: Duration::ZERO,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << attempt.min(16))
    }
}

/// Backend plus policy: retries, caching, usage recording, and embedding
/// dimension checks.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    cache: Option<Arc<DiskCache>>,
    embed_cache: Arc<Mutex<HashMap<String, Vec<f64>>>>,
    embed_dims: Arc<Mutex<HashMap<String, usize>>>,
    ledger: UsageLedger,
}

impl Gateway {
    pub fn new(backend: impl Backend + 'static) -> Self {
        Self::from_arc(Arc::new(backend))
    }

    pub fn from_arc(backend: Arc<dyn Backend>) -> Self {
        Gateway {
            backend,
            retry: RetryPolicy::default(),
            cache: None,
            embed_cache: Arc::new(Mutex::new(HashMap::new())),
            embed_dims: Arc::new(Mutex::new(HashMap::new())),
            ledger: UsageLedger::new(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_disk_cache(mut self, dir: impl Into<std::path::PathBuf>) -> std::io::Result<Self> {
        self.cache = Some(Arc::new(DiskCache::new(dir)?));
        Ok(self)
    }

    /// A gateway sharing this one's backend, policy, and caches, but with a
    /// fresh ledger.
    pub fn fork(&self) -> Gateway {
        Gateway {
            backend: Arc::clone(&self.backend),
            retry: self.retry,
            cache: self.cache.clone(),
            embed_cache: Arc::clone(&self.embed_cache),
            embed_dims: Arc::clone(&self.embed_dims),
            ledger: UsageLedger::new(),
        }
    }

    pub fn ledger(&self) -> &UsageLedger {
        &self.ledger
    }

    pub fn complete(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
    ) -> Result<CompletionResult, GatewayError> {
        self.complete_attempt(endpoint, prompt, 0)
    }

    /// Like [`Self::complete`], but keyed by a parse-retry attempt so that a
    /// re-request after a malformed reply bypasses the cached response.
    pub fn complete_attempt(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
        attempt: u32,
    ) -> Result<CompletionResult, GatewayError> {
        if prompt.is_empty() {
            return Err(GatewayError::Config {
                endpoint: endpoint.name.clone(),
                message: "prompt must not be empty".into(),
            });
        }
        let key = completion_key(endpoint, prompt, attempt);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get_completion(&key) {
                let result = CompletionResult {
                    text: hit.text,
                    input_tokens: hit.input_tokens,
                    output_tokens: hit.output_tokens,
                    endpoint_name: endpoint.name.clone(),
                    latency: Duration::ZERO,
                    estimated: hit.estimated,
                    cached: true,
                };
                self.ledger.record(&result);
                return Ok(result);
            }
        }
        let result = self.with_retries(|| self.backend.complete(endpoint, prompt))?;
        if let Some(cache) = &self.cache {
            cache.put_completion(
                &key,
                &CachedCompletion {
                    text: result.text.clone(),
                    input_tokens: result.input_tokens,
                    output_tokens: result.output_tokens,
                    estimated: result.estimated,
                },
            );
        }
        self.ledger.record(&result);
        Ok(result)
    }

    pub fn embed(&self, endpoint: &ModelEndpoint, text: &str) -> Result<Vec<f64>, GatewayError> {
        if endpoint.role != Role::Embedder {
            return Err(GatewayError::Config {
                endpoint: endpoint.name.clone(),
                message: format!("embed requires an embedder endpoint, got {:?}", endpoint.role),
            });
        }
        let key = embedding_key(endpoint, text);
        if let Some(hit) = self.embed_cache.lock().expect("embed cache lock").get(&key) {
            return Ok(hit.clone());
        }
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get_embedding(&key) {
                self.check_dimension(endpoint, hit.len())?;
                self.embed_cache
                    .lock()
                    .expect("embed cache lock")
                    .insert(key, hit.clone());
                return Ok(hit);
            }
        }
        let vector = self.with_retries(|| self.backend.embed(endpoint, text))?;
        self.check_dimension(endpoint, vector.len())?;
        if let Some(cache) = &self.cache {
            cache.put_embedding(&key, &vector);
        }
        self.embed_cache
            .lock()
            .expect("embed cache lock")
            .insert(key, vector.clone());
        Ok(vector)
    }

    fn check_dimension(&self, endpoint: &ModelEndpoint, got: usize) -> Result<(), GatewayError> {
        let mut dims = self.embed_dims.lock().expect("dims lock");
        match dims.get(&endpoint.name) {
            Some(&expected) if expected != got => Err(GatewayError::DimensionMismatch {
                endpoint: endpoint.name.clone(),
                expected,
                got,
            }),
            Some(_) => Ok(()),
            None => {
                dims.insert(endpoint.name.clone(), got);
                Ok(())
            }
        }
    }

    fn with_retries<T>(
        &self,
        mut call: impl FnMut() -> Result<T, GatewayError>,
    ) -> Result<T, GatewayError> {
        let mut attempt = 0;
        loop {
            match call() {
                Ok(value) => return Ok(value),
                Err(err) if err.is_transient() && attempt < self.retry.max_retries => {
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }
}
