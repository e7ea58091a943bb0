//! Contracts for the two model dependencies (text embedding and structured
//! completion) plus deterministic in-process implementations.

mod hash;
mod remote;
mod scripted;

pub use hash::{tokenize, HashEmbedder};
pub use remote::{RemoteCompleter, RemoteConfig, RemoteEmbedder};
pub use scripted::{Matcher, ScriptBuilder, ScriptEntry, ScriptReply, ScriptedCompleter};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ProviderError {
    #[error("provider failure: {0}")]
    Failure(String),
    #[error("provider returned malformed response: {0}")]
    Malformed(String),
    #[error("provider not configured")]
    Unconfigured,
}

/// Every language-model role in the engine maps to one prompt kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PromptKind {
    DualExtract,
    HypeQueries,
    ScopeInference,
    FullRouteAnalysis,
    CompletenessJudge,
    FollowupQueries,
    AnswerSynthesis,
    SchemaAuthor,
    SchemaEnhance,
    PropertyAnalysis,
    PropertyOptimize,
    RubricScore,
}

impl PromptKind {
    pub const ALL: [PromptKind; 12] = [
        PromptKind::DualExtract,
        PromptKind::HypeQueries,
        PromptKind::ScopeInference,
        PromptKind::FullRouteAnalysis,
        PromptKind::CompletenessJudge,
        PromptKind::FollowupQueries,
        PromptKind::AnswerSynthesis,
        PromptKind::SchemaAuthor,
        PromptKind::SchemaEnhance,
        PromptKind::PropertyAnalysis,
        PromptKind::PropertyOptimize,
        PromptKind::RubricScore,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::DualExtract => "dualExtract",
            PromptKind::HypeQueries => "hypeQueries",
            PromptKind::ScopeInference => "scopeInference",
            PromptKind::FullRouteAnalysis => "fullRouteAnalysis",
            PromptKind::CompletenessJudge => "completenessJudge",
            PromptKind::FollowupQueries => "followupQueries",
            PromptKind::AnswerSynthesis => "answerSynthesis",
            PromptKind::SchemaAuthor => "schemaAuthor",
            PromptKind::SchemaEnhance => "schemaEnhance",
            PromptKind::PropertyAnalysis => "propertyAnalysis",
            PromptKind::PropertyOptimize => "propertyOptimize",
            PromptKind::RubricScore => "rubricScore",
        }
    }

    /// The response a fail-neutral provider returns when it has nothing
    /// better: pipelines treat it as "no signal" and carry on.
    pub fn neutral_response(self) -> Value {
        match self {
            PromptKind::DualExtract => json!({"facts": [], "properties": []}),
            PromptKind::HypeQueries | PromptKind::FollowupQueries => json!({"queries": []}),
            PromptKind::ScopeInference => json!({"alwaysOn": false}),
            PromptKind::FullRouteAnalysis => json!({"selections": []}),
            PromptKind::CompletenessJudge => json!({"complete": true, "missing": []}),
            PromptKind::AnswerSynthesis => json!({"text": "", "sourceIds": []}),
            PromptKind::SchemaAuthor => json!({"properties": []}),
            PromptKind::SchemaEnhance | PromptKind::PropertyOptimize => json!({}),
            PromptKind::PropertyAnalysis => json!({"diagnoses": []}),
            PromptKind::RubricScore => json!({"scores": {}}),
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown prompt kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CompletionRequest {
    pub prompt_kind: PromptKind,
    pub payload: Value,
    pub temperature: f64,
}

impl CompletionRequest {
    pub fn new(prompt_kind: PromptKind, payload: Value, temperature: f64) -> Self {
        Self {
            prompt_kind,
            payload,
            temperature,
        }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    /// Unit-norm vectors, one per input, all of [`dimension`](Self::dimension).
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;

    fn dimension(&self) -> usize;

    fn embed_one(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        self.embed(&[text.to_string()])?
            .pop()
            .ok_or_else(|| ProviderError::Malformed("empty embedding batch".into()))
    }
}

pub trait CompletionProvider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Value, ProviderError>;

    fn model_id(&self) -> String;
}

/// Cosine similarity of two vectors, accumulated in f64.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Dot product for vectors already known to be unit-norm.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

pub fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}
