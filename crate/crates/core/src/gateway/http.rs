//! OpenAI-compatible HTTP clients for chat completions and embeddings, plus
//! a minimal JSON reranker client.
//!
//! Every network attempt bumps a process-wide counter so offline test suites
//! can assert they never touched the network.

use std::env;
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{ChatProvider, ChatRequest, GatewayError};
pub use crate::config::HttpConfig;
use crate::retrieval::Embedder;
use crate::selection::Reranker;

static NETWORK_ATTEMPTS: AtomicU64 = AtomicU64::new(0);

/// Number of HTTP requests attempted by this process.
pub fn network_attempts() -> u64 {
    NETWORK_ATTEMPTS.load(Ordering::Relaxed)
}

struct Client {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl Client {
    fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn api_key(&self) -> Result<Option<String>, GatewayError> {
        if self.config.api_key_env.is_empty() {
            return Ok(None);
        }
        env::var(&self.config.api_key_env)
            .map(Some)
            .map_err(|_| GatewayError::MissingApiKey(self.config.api_key_env.clone()))
    }

    /// POSTs `body`, retrying transport errors, 429 and 5xx with exponential backoff.
    fn post(&self, url: &str, body: &Value) -> Result<Value, GatewayError> {
        let key = self.api_key()?;
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let mut attempt = 0;
        loop {
            attempt += 1;
            NETWORK_ATTEMPTS.fetch_add(1, Ordering::Relaxed);
            let mut req = self.agent.post(url);
            if let Some(key) = &key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let retryable = match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        return resp
                            .body_mut()
                            .read_json::<Value>()
                            .map_err(|e| GatewayError::Decode(e.to_string()));
                    }
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    let err = GatewayError::Status { status, body: text };
                    if status == 429 || status >= 500 {
                        err
                    } else {
                        return Err(err);
                    }
                }
                Err(e) => GatewayError::Network(e.to_string()),
            };
            if attempt > self.config.max_retries {
                return Err(retryable);
            }
            thread::sleep(backoff);
            backoff *= 2;
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }
}

/// Chat completions against `{base_url}/chat/completions`.
pub struct OpenAiChat {
    client: Client,
    model: String,
}

impl OpenAiChat {
    pub fn new(config: HttpConfig, model: impl Into<String>) -> Self {
        Self {
            client: Client::new(config),
            model: model.into(),
        }
    }
}

impl ChatProvider for OpenAiChat {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let model = if request.model.is_empty() {
            &self.model
        } else {
            &request.model
        };
        let body = json!({
            "model": model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let resp = self.client.post(&self.client.url("chat/completions"), &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| GatewayError::Decode("missing choices[0].message.content".into()))
    }
}

/// Embeddings against `{base_url}/embeddings`.
pub struct OpenAiEmbedder {
    client: Client,
    model: String,
}

impl OpenAiEmbedder {
    pub fn new(config: HttpConfig, model: impl Into<String>) -> Self {
        Self {
            client: Client::new(config),
            model: model.into(),
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingItem {
    index: usize,
    embedding: Vec<f64>,
}

impl Embedder for OpenAiEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = json!({ "model": self.model, "input": texts });
        let resp = self.client.post(&self.client.url("embeddings"), &body)?;
        let mut items: Vec<EmbeddingItem> = serde_json::from_value(
            resp.get("data").cloned().unwrap_or(Value::Null),
        )
        .map_err(|e| GatewayError::Decode(e.to_string()))?;
        if items.len() != texts.len() {
            return Err(GatewayError::Decode(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                items.len()
            )));
        }
        items.sort_by_key(|i| i.index);
        Ok(items.into_iter().map(|i| i.embedding).collect())
    }
}

/// Reranker service: POST `{"model", "query", "passages": [..]}` to the
/// configured URL, expecting `{"scores": [..]}` of the same length.
pub struct HttpReranker {
    client: Client,
    url: String,
    model: String,
}

impl HttpReranker {
    pub fn new(config: HttpConfig, url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            client: Client::new(config),
            url: url.into(),
            model: model.into(),
        }
    }
}

impl Reranker for HttpReranker {
    fn score(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>, GatewayError> {
        let body = json!({ "model": self.model, "query": query, "passages": passages });
        let resp = self.client.post(&self.url, &body)?;
        let scores: Vec<f64> =
            serde_json::from_value(resp.get("scores").cloned().unwrap_or(Value::Null))
                .map_err(|e| GatewayError::Decode(e.to_string()))?;
        if scores.len() != passages.len() {
            return Err(GatewayError::Decode(format!(
                "expected {} scores, got {}",
                passages.len(),
                scores.len()
            )));
        }
        Ok(scores)
    }
}
