//! Service configuration: one TOML or JSON file plus `GMEM_*` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use gmem_core::engine::{Engine, EngineError, ErrorKind};
use gmem_core::model::EngineConfig;
use gmem_core::providers::{
    CompletionProvider, EmbeddingProvider, HashEmbedder, RemoteCompleter, RemoteConfig, RemoteEmbedder, ScriptedCompleter,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

pub const DEFAULT_CONFIG_FILE: &str = "gmem.toml";
const MASK: &str = "***";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file not found: {0}")]
    NotFound(PathBuf),
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ConfigError {
    pub fn kind(&self) -> &'static str {
        match self {
            ConfigError::NotFound(_) => "config_not_found",
            ConfigError::Read { .. } => "config_unreadable",
            ConfigError::Invalid(_) => "config_invalid",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ProviderConfig {
    /// Completion endpoint; the service posts to `{endpoint}/v1/complete`.
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    /// Embedding endpoint; the built-in hash embedder is used when absent.
    pub embedding_endpoint: Option<String>,
    pub embedding_model: Option<String>,
    /// Scripted completion responses (JSON list), for offline runs.
    pub script: Option<PathBuf>,
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ServerConfig {
    pub engine: EngineConfig,
    /// Persistent store directory; in-memory when absent.
    pub data_dir: Option<PathBuf>,
    /// Operation log (JSON lines) for mutating requests.
    pub op_log: Option<PathBuf>,
    /// Bearer token to orgId. When empty the token itself is the orgId.
    pub tokens: BTreeMap<String, String>,
    pub provider: ProviderConfig,
}

fn env_name(camel: &str) -> String {
    let mut out = String::from("GMEM_");
    for c in camel.chars() {
        if c.is_ascii_uppercase() {
            out.push('_');
        }
        out.push(c.to_ascii_uppercase());
    }
    out
}

impl ServerConfig {
    /// Reads `path`, else `$GMEM_CONFIG`, else `./gmem.toml` when present,
    /// else defaults; then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let explicit = path
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os("GMEM_CONFIG").map(PathBuf::from));
        let mut cfg = match explicit {
            Some(p) if !p.exists() => return Err(ConfigError::NotFound(p)),
            Some(p) => Self::from_file(&p)?,
            None if Path::new(DEFAULT_CONFIG_FILE).exists() => Self::from_file(Path::new(DEFAULT_CONFIG_FILE))?,
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))
        }
    }

    /// Overrides from `lookup`. Every engine field has a variable named after
    /// it (`writeDedupThreshold` is `GMEM_WRITE_DEDUP_THRESHOLD`).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let Value::Object(mut engine) = serde_json::to_value(&self.engine).map_err(|e| ConfigError::Invalid(e.to_string()))? else {
            return Err(ConfigError::Invalid("engine config is not an object".into()));
        };
        let mut changed = false;
        for (key, value) in engine.iter_mut() {
            let name = env_name(key);
            if let Some(raw) = lookup(&name) {
                *value = serde_json::from_str(&raw).map_err(|_| ConfigError::Invalid(format!("{name}={raw} is not a number")))?;
                changed = true;
            }
        }
        if changed {
            self.engine = serde_json::from_value(Value::Object(engine)).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        let set = |slot: &mut Option<String>, name: &str| {
            if let Some(v) = lookup(name).filter(|v| !v.is_empty()) {
                *slot = Some(v);
            }
        };
        set(&mut self.provider.endpoint, "GMEM_PROVIDER_ENDPOINT");
        set(&mut self.provider.model, "GMEM_MODEL_ID");
        set(&mut self.provider.api_key, "GMEM_API_KEY");
        set(&mut self.provider.embedding_endpoint, "GMEM_EMBEDDING_ENDPOINT");
        set(&mut self.provider.embedding_model, "GMEM_EMBEDDING_MODEL");
        if let Some(v) = lookup("GMEM_SCRIPT").filter(|v| !v.is_empty()) {
            self.provider.script = Some(v.into());
        }
        if let Some(v) = lookup("GMEM_DATA_DIR").filter(|v| !v.is_empty()) {
            self.data_dir = Some(v.into());
        }
        if let Some(v) = lookup("GMEM_OP_LOG").filter(|v| !v.is_empty()) {
            self.op_log = Some(v.into());
        }
        if let Some(v) = lookup("GMEM_TOKENS").filter(|v| !v.is_empty()) {
            for pair in v.split(',') {
                let (token, org) = pair
                    .split_once('=')
                    .ok_or_else(|| ConfigError::Invalid(format!("GMEM_TOKENS entry {pair:?} is not token=org")))?;
                self.tokens.insert(token.trim().to_string(), org.trim().to_string());
            }
        }
        Ok(())
    }

    pub fn has_completer(&self) -> bool {
        self.provider.script.is_some() || self.provider.endpoint.is_some()
    }

    /// The configuration with the API key and bearer tokens masked.
    pub fn masked(&self) -> Value {
        let tokens: Map<String, Value> = self
            .tokens
            .values()
            .enumerate()
            .map(|(i, org)| (format!("{MASK}{i}"), json!(org)))
            .collect();
        json!({
            "engine": self.engine,
            "dataDir": self.data_dir,
            "opLog": self.op_log,
            "tokens": tokens,
            "provider": {
                "endpoint": self.provider.endpoint,
                "model": self.provider.model,
                "apiKey": self.provider.api_key.as_ref().map(|_| MASK),
                "embeddingEndpoint": self.provider.embedding_endpoint,
                "embeddingModel": self.provider.embedding_model,
                "script": self.provider.script,
            },
        })
    }

    fn remote(&self, endpoint: &str, model: Option<&String>) -> RemoteConfig {
        let mut rc = RemoteConfig::new(endpoint, model.cloned().unwrap_or_else(|| "default".into()));
        rc.api_key = self.provider.api_key.clone();
        if let Some(t) = self.provider.timeout_secs {
            rc.timeout = Duration::from_secs(t);
        }
        rc
    }

    pub fn completer(&self) -> Result<Option<Arc<dyn CompletionProvider>>, EngineError> {
        if let Some(path) = &self.provider.script {
            let text = std::fs::read_to_string(path)
                .map_err(|e| EngineError::new(ErrorKind::BadRequest, format!("script {}: {e}", path.display())))?;
            let script = ScriptedCompleter::from_json(&text).map_err(|e| EngineError::new(ErrorKind::BadRequest, e.to_string()))?;
            return Ok(Some(Arc::new(script)));
        }
        Ok(self
            .provider
            .endpoint
            .as_ref()
            .map(|ep| Arc::new(RemoteCompleter::new(self.remote(ep, self.provider.model.as_ref()))) as Arc<dyn CompletionProvider>))
    }

    pub fn embedder(&self) -> Arc<dyn EmbeddingProvider> {
        match &self.provider.embedding_endpoint {
            Some(ep) => Arc::new(RemoteEmbedder::new(
                self.remote(ep, self.provider.embedding_model.as_ref()),
                self.engine.embedding_dim,
            )),
            None => Arc::new(HashEmbedder::new(self.engine.embedding_dim)),
        }
    }

    pub fn build_engine(&self) -> Result<Engine, EngineError> {
        let mut b = Engine::builder()
            .config(self.engine.clone())
            .embedder(self.embedder())
            .maybe_completer(self.completer()?);
        if let Some(d) = &self.data_dir {
            b = b.data_dir(d);
        }
        b.build()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_names() {
        assert_eq!(env_name("writeDedupThreshold"), "GMEM_WRITE_DEDUP_THRESHOLD");
        assert_eq!(env_name("embeddingDim"), "GMEM_EMBEDDING_DIM");
    }

    #[test]
    fn env_overrides_engine_and_provider() {
        let mut cfg = ServerConfig::default();
        let env: BTreeMap<&str, &str> = [
            ("GMEM_WRITE_DEDUP_THRESHOLD", "0.9"),
            ("GMEM_API_KEY", "sk-secret"),
            ("GMEM_TOKENS", "t1=acme, t2=globex"),
        ]
        .into();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(cfg.engine.write_dedup_threshold, 0.9);
        assert_eq!(cfg.tokens["t2"], "globex");
        let shown = cfg.masked().to_string();
        assert!(!shown.contains("sk-secret") && !shown.contains("t1"));
        assert!(shown.contains("acme"));
    }

    #[test]
    fn bad_override_is_rejected() {
        let mut cfg = ServerConfig::default();
        let err = cfg
            .apply_env(|k| (k == "GMEM_RETENTION_DAYS").then(|| "soon".to_string()))
            .unwrap_err();
        assert_eq!(err.kind(), "config_invalid");
    }

    #[test]
    fn toml_file_uses_field_names() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "dataDir = \"/tmp/x\"\n[engine]\nrecencyHalfLifeDays = 30.0\n[tokens]\nabc = \"acme\"\n").unwrap();
        let cfg = ServerConfig::from_file(&p).unwrap();
        assert_eq!(cfg.engine.recency_half_life_days, 30.0);
        assert_eq!(cfg.engine.write_dedup_threshold, 0.92);
        assert_eq!(cfg.tokens["abc"], "acme");
        assert!(matches!(ServerConfig::load(Some(&dir.path().join("missing.toml"))), Err(ConfigError::NotFound(_))));
    }
}
