//! HTTP JSON client implementing both provider contracts against a remote
//! model gateway.
//!
//! Wire protocol:
//! - `POST {endpoint}/v1/complete` with `{model, promptKind, payload, temperature}`,
//!   answered by the structured response value itself.
//! - `POST {endpoint}/v1/embed` with `{model, texts}`, answered by `{embeddings: [[f32]]}`.

use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{l2_normalize, CompletionProvider, CompletionRequest, EmbeddingProvider, ProviderError};

pub const ENV_ENDPOINT: &str = "GMEM_PROVIDER_ENDPOINT";
pub const ENV_MODEL: &str = "GMEM_MODEL_ID";
pub const ENV_API_KEY: &str = "GMEM_API_KEY";

const MAX_ATTEMPTS: u32 = 3;
const BACKOFF_BASE: Duration = Duration::from_millis(100);

#[derive(Clone, PartialEq)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl std::fmt::Debug for RemoteConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteConfig")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "***"))
            .finish()
    }
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(60),
        }
    }

    /// Reads endpoint, model id and API key from the environment.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok().filter(|s| !s.is_empty())?;
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "default".to_string());
        let mut cfg = Self::new(endpoint, model);
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty());
        Some(cfg)
    }
}

#[derive(Debug, Clone)]
struct Client {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

impl Client {
    fn new(cfg: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .build()
            .into();
        Self { cfg, agent }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        let url = format!("{}{}", self.cfg.endpoint, path);
        let mut last_err = String::new();
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 {
                std::thread::sleep(BACKOFF_BASE * 2u32.pow(attempt - 1));
            }
            tracing::debug!(%url, request = %body, "provider request");
            let mut req = self.agent.post(&url);
            if let Some(key) = &self.cfg.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    let value: Value = resp
                        .body_mut()
                        .read_json()
                        .map_err(|e| ProviderError::Malformed(e.to_string()))?;
                    tracing::debug!(%url, response = %value, "provider response");
                    return Ok(value);
                }
                Err(ureq::Error::StatusCode(code)) if (400..500).contains(&code) && code != 429 => {
                    return Err(ProviderError::Failure(format!("{url} returned {code}")));
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(ProviderError::Failure(format!("{url}: {last_err}")))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteCompleter {
    client: Client,
}

impl RemoteCompleter {
    pub fn new(cfg: RemoteConfig) -> Self {
        Self {
            client: Client::new(cfg),
        }
    }
}

impl CompletionProvider for RemoteCompleter {
    fn complete(&self, request: &CompletionRequest) -> Result<Value, ProviderError> {
        let body = json!({
            "model": self.client.cfg.model,
            "promptKind": request.prompt_kind,
            "payload": request.payload,
            "temperature": request.temperature,
        });
        self.client.post("/v1/complete", &body)
    }

    fn model_id(&self) -> String {
        self.client.cfg.model.clone()
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    client: Client,
    dim: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f32>>,
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteConfig, dim: usize) -> Self {
        Self {
            client: Client::new(cfg),
            dim,
        }
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = json!({"model": self.client.cfg.model, "texts": texts});
        let raw = self.client.post("/v1/embed", &body)?;
        let parsed: EmbedResponse =
            serde_json::from_value(raw).map_err(|e| ProviderError::Malformed(e.to_string()))?;
        if parsed.embeddings.len() != texts.len() {
            return Err(ProviderError::Malformed(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.embeddings.len()
            )));
        }
        parsed
            .embeddings
            .into_iter()
            .map(|mut v| {
                if v.len() != self.dim {
                    return Err(ProviderError::Malformed(format!(
                        "embedding dimension {} != {}",
                        v.len(),
                        self.dim
                    )));
                }
                l2_normalize(&mut v);
                Ok(v)
            })
            .collect()
    }

    fn dimension(&self) -> usize {
        self.dim
    }
}
