//! Governance variable library, creation-time enrichment, tiered routing and
//! session-scoped progressive delivery.

mod route;
mod sections;
mod session;

pub use route::{
    embedding_prefilter, fast_route, fast_selections, full_route, route_governance, CriticalItem, DeliveryMode, PrefilterHit,
    RouteMode, RouteOptions, RoutedContext, Selection, SupplementaryItem,
};
pub use sections::{extract_sections, parse_headings, Heading};
pub use session::{deliver_delta, DeliveredSections, SessionState, SessionStore};

use std::collections::BTreeMap;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::providers::{CompletionProvider, CompletionRequest, EmbeddingProvider, PromptKind, ProviderError};

pub const MAX_HYPE_QUERIES: usize = 8;
const EMBED_CONTENT_PREFIX_CHARS: usize = 500;
const HYPE_TEMPERATURE: f64 = 0.7;
const SCOPE_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GovernanceError {
    #[error("governance library is empty")]
    EmptyLibrary,
    #[error("variable requires a non-empty name and content")]
    InvalidVariable,
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error("version conflict on {id}: expected {expected}, found {found}")]
    VersionConflict { id: String, expected: u32, found: u32 },
    #[error("session {0} has expired")]
    SessionExpired(String),
    #[error("session {0} belongs to another organization")]
    SessionOrgMismatch(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Visibility {
    #[default]
    Organization,
    Private,
    AdminsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AccessLevel {
    #[default]
    ReadOnly,
    Cloneable,
    Editable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GovernanceVariable {
    pub id: String,
    pub org_id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub tags: Vec<String>,
    pub content: String,
    #[serde(default)]
    pub headings: Vec<Heading>,
    #[serde(default)]
    pub hype_queries: Vec<String>,
    #[serde(default)]
    pub always_on: bool,
    #[serde(default)]
    pub trigger_keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_embedding: Option<Vec<f32>>,
    #[serde(default)]
    pub hype_embeddings: Vec<Vec<f32>>,
    #[serde(default)]
    pub visibility: Visibility,
    #[serde(default)]
    pub access_level: AccessLevel,
    #[serde(default = "first_version")]
    pub version: u32,
}

fn first_version() -> u32 {
    1
}

impl GovernanceVariable {
    pub fn new(id: &str, org_id: &str, name: &str, description: &str, tags: &[&str], content: &str) -> Self {
        Self {
            id: id.to_string(),
            org_id: org_id.to_string(),
            name: name.to_string(),
            description: description.to_string(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
            content: content.to_string(),
            headings: parse_headings(content),
            hype_queries: Vec::new(),
            always_on: false,
            trigger_keywords: Vec::new(),
            content_embedding: None,
            hype_embeddings: Vec::new(),
            visibility: Visibility::default(),
            access_level: AccessLevel::default(),
            version: 1,
        }
    }

    pub fn metadata_text(&self) -> String {
        format!("{} {} {}", self.name, self.description, self.tags.join(" "))
    }

    /// Text behind the content embedding: metadata plus the opening of the body.
    pub fn embedding_text(&self) -> String {
        let prefix: String = self.content.chars().take(EMBED_CONTENT_PREFIX_CHARS).collect();
        format!("{}\n{}", self.metadata_text(), prefix)
    }

    pub fn content_chars(&self) -> usize {
        self.content.chars().count()
    }

    pub fn validate(&self) -> Result<(), GovernanceError> {
        if self.name.trim().is_empty() || self.content.trim().is_empty() || self.id.trim().is_empty() {
            return Err(GovernanceError::InvalidVariable);
        }
        Ok(())
    }
}

fn hype_step(v: &GovernanceVariable, completer: Option<&dyn CompletionProvider>) -> Vec<String> {
    let Some(c) = completer else { return Vec::new() };
    let payload = json!({
        "name": v.name,
        "description": v.description,
        "tags": v.tags,
        "content": v.content,
    });
    match c.complete(&CompletionRequest::new(PromptKind::HypeQueries, payload, HYPE_TEMPERATURE)) {
        Ok(r) => r["queries"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|q| q.as_str())
            .map(|q| q.trim().to_string())
            .filter(|q| !q.is_empty())
            .take(MAX_HYPE_QUERIES)
            .collect(),
        Err(e) => {
            tracing::warn!(variable = %v.id, error = %e, "synthetic query generation failed");
            Vec::new()
        }
    }
}

fn scope_step(v: &GovernanceVariable, completer: Option<&dyn CompletionProvider>) -> (bool, Vec<String>) {
    let fallback = (false, v.tags.clone());
    let Some(c) = completer else { return fallback };
    let payload = json!({
        "name": v.name,
        "description": v.description,
        "tags": v.tags,
        "content": v.content,
    });
    match c.complete(&CompletionRequest::new(PromptKind::ScopeInference, payload, SCOPE_TEMPERATURE)) {
        Ok(r) => {
            let always_on = r["alwaysOn"].as_bool().unwrap_or(false);
            let keywords: Vec<String> = r["triggerKeywords"]
                .as_array()
                .into_iter()
                .flatten()
                .filter_map(|k| k.as_str())
                .map(|k| k.trim().to_lowercase())
                .filter(|k| !k.is_empty())
                .collect();
            (always_on, if keywords.is_empty() { v.tags.clone() } else { keywords })
        }
        Err(e) => {
            tracing::warn!(variable = %v.id, error = %e, "scope inference failed");
            fallback
        }
    }
}

/// Synthetic queries, scope inference and the content embedding, computed
/// concurrently; each step falls back to a neutral value on failure.
pub fn enrich_variable(
    mut v: GovernanceVariable,
    completer: Option<&dyn CompletionProvider>,
    embedder: &dyn EmbeddingProvider,
) -> Result<GovernanceVariable, GovernanceError> {
    v.validate()?;
    v.headings = parse_headings(&v.content);
    let (hype, (always_on, triggers), content_embedding) = std::thread::scope(|s| {
        let vr = &v;
        let h = s.spawn(move || hype_step(vr, completer));
        let sc = s.spawn(move || scope_step(vr, completer));
        let emb = embedder.embed_one(&vr.embedding_text()).ok();
        (
            h.join().unwrap_or_default(),
            sc.join().unwrap_or_else(|_| (false, vr.tags.clone())),
            emb,
        )
    });
    v.hype_embeddings = if hype.is_empty() {
        Vec::new()
    } else {
        embedder.embed(&hype).unwrap_or_else(|e| {
            tracing::warn!(variable = %v.id, error = %e, "synthetic query embedding failed");
            Vec::new()
        })
    };
    v.hype_queries = hype;
    v.always_on = always_on;
    v.trigger_keywords = triggers;
    v.content_embedding = content_embedding;
    Ok(v)
}

/// In-process variable library keyed by `(orgId, id)`.
#[derive(Debug, Default)]
pub struct GovernanceLibrary {
    vars: RwLock<BTreeMap<(String, String), GovernanceVariable>>,
}

impl GovernanceLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_variables(vars: Vec<GovernanceVariable>) -> Self {
        let lib = Self::new();
        for v in vars {
            lib.vars.write().insert((v.org_id.clone(), v.id.clone()), v);
        }
        lib
    }

    pub fn get(&self, org_id: &str, id: &str) -> Option<GovernanceVariable> {
        self.vars.read().get(&(org_id.to_string(), id.to_string())).cloned()
    }

    pub fn list(&self, org_id: &str) -> Vec<GovernanceVariable> {
        self.vars
            .read()
            .iter()
            .filter(|((o, _), _)| o == org_id)
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all(&self) -> Vec<GovernanceVariable> {
        self.vars.read().values().cloned().collect()
    }

    /// Inserts a new variable, or replaces one whose stored version equals
    /// `expected_version`; the stored version is bumped on replacement.
    pub fn put(
        &self,
        mut v: GovernanceVariable,
        expected_version: Option<u32>,
    ) -> Result<GovernanceVariable, GovernanceError> {
        v.validate()?;
        let key = (v.org_id.clone(), v.id.clone());
        let mut map = self.vars.write();
        match map.get(&key) {
            Some(cur) => {
                if let Some(exp) = expected_version {
                    if exp != cur.version {
                        return Err(GovernanceError::VersionConflict {
                            id: v.id,
                            expected: exp,
                            found: cur.version,
                        });
                    }
                }
                v.version = cur.version + 1;
            }
            None => v.version = v.version.max(1),
        }
        map.insert(key, v.clone());
        Ok(v)
    }

    pub fn remove(&self, org_id: &str, id: &str) -> Option<GovernanceVariable> {
        self.vars.write().remove(&(org_id.to_string(), id.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{HashEmbedder, Matcher, ScriptedCompleter};

    fn var() -> GovernanceVariable {
        GovernanceVariable::new("v1", "o", "Pricing policy", "discount rules", &["pricing", "sales"], "# Rules\nNo discounts above 20%.\n")
    }

    #[test]
    fn enrichment_uses_provider() {
        let c = ScriptedCompleter::builder()
            .always(PromptKind::HypeQueries, json!({"queries": ["q1", "q2", "q3", "q4", "q5"]}))
            .always(PromptKind::ScopeInference, json!({"alwaysOn": true, "triggerKeywords": ["Discount"]}))
            .build();
        let e = HashEmbedder::new(64);
        let v = enrich_variable(var(), Some(&c), &e).unwrap();
        assert_eq!(v.hype_embeddings.len(), 5);
        assert!(v.always_on);
        assert_eq!(v.trigger_keywords, vec!["discount"]);
        assert!(v.content_embedding.is_some());
        assert_eq!(v.headings.len(), 1);
    }

    #[test]
    fn enrichment_fail_neutral() {
        let c = ScriptedCompleter::builder()
            .fail(PromptKind::HypeQueries, Matcher::Any, "down")
            .fail(PromptKind::ScopeInference, Matcher::Any, "down")
            .build();
        let v = enrich_variable(var(), Some(&c), &HashEmbedder::new(64)).unwrap();
        assert!(v.hype_queries.is_empty() && !v.always_on);
        assert_eq!(v.trigger_keywords, vec!["pricing", "sales"]);
    }

    #[test]
    fn library_versions() {
        let lib = GovernanceLibrary::new();
        let v = lib.put(var(), None).unwrap();
        assert_eq!(v.version, 1);
        let v2 = lib.put(var(), Some(1)).unwrap();
        assert_eq!(v2.version, 2);
        assert!(matches!(lib.put(var(), Some(1)), Err(GovernanceError::VersionConflict { .. })));
    }
}
