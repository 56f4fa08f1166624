//! Live backend speaking the chat-completions wire protocol.
//!
//! Completions POST to `{base_url}/chat/completions` with a model id, a
//! message list, temperature, and max tokens, and read the reply text plus
//! usage token counts. Embeddings POST to `{base_url}/embeddings`. Auth is a
//! bearer token read from the environment variable named by the endpoint.

use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{estimate_tokens, Backend, CompletionResult, GatewayError, ModelEndpoint};

const CHAT_PATH: &str = "/chat/completions";
const EMBEDDINGS_PATH: &str = "/embeddings";

#[derive(Debug)]
pub struct HttpBackend {
    agent: ureq::Agent,
}

impl Default for HttpBackend {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl HttpBackend {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        HttpBackend {
            agent: ureq::Agent::new_with_config(config),
        }
    }

    fn url(endpoint: &ModelEndpoint, path: &str) -> Result<String, GatewayError> {
        let base = endpoint.base_url.trim_end_matches('/');
        if base.is_empty() {
            return Err(GatewayError::Config {
                endpoint: endpoint.name.clone(),
                message: "endpoint has no base_url".into(),
            });
        }
        Ok(format!("{base}{path}"))
    }

    fn bearer(endpoint: &ModelEndpoint) -> Result<Option<String>, GatewayError> {
        match &endpoint.auth_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(key) if !key.is_empty() => Ok(Some(format!("Bearer {key}"))),
                _ => Err(GatewayError::AuthFailure {
                    endpoint: endpoint.name.clone(),
                    message: format!("environment variable {var} is not set"),
                }),
            },
        }
    }

    fn post(
        &self,
        endpoint: &ModelEndpoint,
        path: &str,
        body: serde_json::Value,
    ) -> Result<String, GatewayError> {
        let url = Self::url(endpoint, path)?;
        let mut request = self.agent.post(&url);
        if let Some(bearer) = Self::bearer(endpoint)? {
            request = request.header("Authorization", &bearer);
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| GatewayError::Transport {
                endpoint: endpoint.name.clone(),
                message: e.to_string(),
            })?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport {
                endpoint: endpoint.name.clone(),
                message: e.to_string(),
            })?;
        match status {
            200..=299 => Ok(text),
            401 | 403 => Err(GatewayError::AuthFailure {
                endpoint: endpoint.name.clone(),
                message: format!("status {status}: {}", trim_detail(&text)),
            }),
            429 => Err(GatewayError::RateLimited {
                endpoint: endpoint.name.clone(),
            }),
            _ if is_context_overflow(status, &text) => Err(GatewayError::ContextOverflow {
                endpoint: endpoint.name.clone(),
            }),
            _ => Err(GatewayError::Transport {
                endpoint: endpoint.name.clone(),
                message: format!("status {status}: {}", trim_detail(&text)),
            }),
        }
    }
}

fn trim_detail(body: &str) -> String {
    body.chars().take(300).collect()
}

fn is_context_overflow(status: u16, body: &str) -> bool {
    (status == 400 || status == 413)
        && (body.contains("context_length_exceeded")
            || body.contains("context window")
            || body.contains("maximum context"))
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
}

impl Backend for HttpBackend {
    fn complete(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
    ) -> Result<CompletionResult, GatewayError> {
        let body = json!({
            "model": endpoint.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": endpoint.params.temperature,
            "max_tokens": endpoint.params.max_tokens,
        });
        let started = Instant::now();
        let raw = self.post(endpoint, CHAT_PATH, body)?;
        let latency = started.elapsed();
        let parsed: ChatResponse =
            serde_json::from_str(&raw).map_err(|e| GatewayError::Transport {
                endpoint: endpoint.name.clone(),
                message: format!("bad completion payload: {e}"),
            })?;
        let text = parsed
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .ok_or_else(|| GatewayError::Transport {
                endpoint: endpoint.name.clone(),
                message: "completion reply has no message content".into(),
            })?;
        let usage = parsed.usage.as_ref();
        let provider_in = usage.and_then(|u| u.prompt_tokens);
        let provider_out = usage.and_then(|u| u.completion_tokens);
        let estimated = provider_in.is_none() || provider_out.is_none();
        Ok(CompletionResult {
            input_tokens: provider_in.unwrap_or_else(|| estimate_tokens(prompt)),
            output_tokens: provider_out.unwrap_or_else(|| estimate_tokens(&text)),
            text,
            endpoint_name: endpoint.name.clone(),
            latency,
            estimated,
            cached: false,
        })
    }

    fn embed(&self, endpoint: &ModelEndpoint, text: &str) -> Result<Vec<f64>, GatewayError> {
        let body = json!({
            "model": endpoint.model_id,
            "input": text,
        });
        let raw = self.post(endpoint, EMBEDDINGS_PATH, body)?;
        let parsed: EmbeddingResponse =
            serde_json::from_str(&raw).map_err(|e| GatewayError::Transport {
                endpoint: endpoint.name.clone(),
                message: format!("bad embedding payload: {e}"),
            })?;
        parsed
            .data
            .into_iter()
            .next()
            .map(|item| item.embedding)
            .ok_or_else(|| GatewayError::Transport {
                endpoint: endpoint.name.clone(),
                message: "embedding reply has no data".into(),
            })
    }
}
