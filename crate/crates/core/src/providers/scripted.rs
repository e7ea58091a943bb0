use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CompletionProvider, CompletionRequest, PromptKind, ProviderError};

type Predicate = Arc<dyn Fn(&Value) -> bool + Send + Sync>;

#[derive(Clone)]
pub enum Matcher {
    Any,
    /// Serialized payload contains the marker string.
    Contains(String),
    Predicate(Predicate),
}

impl Matcher {
    pub fn predicate(f: impl Fn(&Value) -> bool + Send + Sync + 'static) -> Self {
        Matcher::Predicate(Arc::new(f))
    }

    fn matches(&self, payload: &Value, serialized: &str) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::Contains(marker) => serialized.contains(marker.as_str()),
            Matcher::Predicate(f) => f(payload),
        }
    }
}

impl fmt::Debug for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Matcher::Any => f.write_str("Any"),
            Matcher::Contains(m) => f.debug_tuple("Contains").field(m).finish(),
            Matcher::Predicate(_) => f.write_str("Predicate(..)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ScriptReply {
    Respond(Value),
    Fail(String),
}

#[derive(Debug, Clone)]
pub struct ScriptEntry {
    pub kind: PromptKind,
    pub matcher: Matcher,
    pub reply: ScriptReply,
}

/// File form of a script entry: `{"kind": ..., "contains"?: ..., "response"|"fail": ...}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct ScriptEntryFile {
    kind: PromptKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fail: Option<String>,
}

/// Deterministic completion provider backed by a lookup table.
///
/// The first entry whose kind and matcher accept a request supplies the
/// reply; unmatched requests get the kind's neutral response.
pub struct ScriptedCompleter {
    entries: Vec<ScriptEntry>,
    model: String,
    calls: [AtomicUsize; PromptKind::ALL.len()],
    log: Mutex<Vec<CompletionRequest>>,
}

impl fmt::Debug for ScriptedCompleter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedCompleter")
            .field("entries", &self.entries.len())
            .field("model", &self.model)
            .finish()
    }
}

impl Default for ScriptedCompleter {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

impl ScriptedCompleter {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self {
            entries,
            model: "scripted-v1".to_string(),
            calls: Default::default(),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn builder() -> ScriptBuilder {
        ScriptBuilder::default()
    }

    /// Parses a JSON array of `{kind, contains?, response | fail}` objects.
    pub fn from_json(text: &str) -> Result<Self, ProviderError> {
        let raw: Vec<ScriptEntryFile> =
            serde_json::from_str(text).map_err(|e| ProviderError::Malformed(e.to_string()))?;
        let mut entries = Vec::with_capacity(raw.len());
        for r in raw {
            let reply = match (r.response, r.fail) {
                (Some(v), None) => ScriptReply::Respond(v),
                (None, Some(msg)) => ScriptReply::Fail(msg),
                _ => {
                    return Err(ProviderError::Malformed(
                        "script entry needs exactly one of `response` or `fail`".into(),
                    ))
                }
            };
            entries.push(ScriptEntry {
                kind: r.kind,
                matcher: r.contains.map_or(Matcher::Any, Matcher::Contains),
                reply,
            });
        }
        Ok(Self::new(entries))
    }

    pub fn calls(&self, kind: PromptKind) -> usize {
        self.calls[kind as usize].load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> usize {
        self.calls.iter().map(|c| c.load(Ordering::SeqCst)).sum()
    }

    /// Every request seen so far, in arrival order.
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.log.lock().clone()
    }
}

impl CompletionProvider for ScriptedCompleter {
    fn complete(&self, request: &CompletionRequest) -> Result<Value, ProviderError> {
        self.calls[request.prompt_kind as usize].fetch_add(1, Ordering::SeqCst);
        self.log.lock().push(request.clone());
        let serialized = request.payload.to_string();
        let hit = self
            .entries
            .iter()
            .find(|e| e.kind == request.prompt_kind && e.matcher.matches(&request.payload, &serialized));
        match hit.map(|e| &e.reply) {
            Some(ScriptReply::Respond(v)) => Ok(v.clone()),
            Some(ScriptReply::Fail(msg)) => Err(ProviderError::Failure(msg.clone())),
            None => Ok(request.prompt_kind.neutral_response()),
        }
    }

    fn model_id(&self) -> String {
        self.model.clone()
    }
}

#[derive(Debug, Default)]
pub struct ScriptBuilder {
    entries: Vec<ScriptEntry>,
}

impl ScriptBuilder {
    pub fn on(mut self, kind: PromptKind, matcher: Matcher, response: Value) -> Self {
        self.entries.push(ScriptEntry {
            kind,
            matcher,
            reply: ScriptReply::Respond(response),
        });
        self
    }

    pub fn always(self, kind: PromptKind, response: Value) -> Self {
        self.on(kind, Matcher::Any, response)
    }

    pub fn when_contains(self, kind: PromptKind, marker: &str, response: Value) -> Self {
        self.on(kind, Matcher::Contains(marker.to_string()), response)
    }

    pub fn fail(mut self, kind: PromptKind, matcher: Matcher, message: &str) -> Self {
        self.entries.push(ScriptEntry {
            kind,
            matcher,
            reply: ScriptReply::Fail(message.to_string()),
        });
        self
    }

    pub fn push(mut self, entry: ScriptEntry) -> Self {
        self.entries.push(entry);
        self
    }

    pub fn build(self) -> ScriptedCompleter {
        ScriptedCompleter::new(self.entries)
    }
}
