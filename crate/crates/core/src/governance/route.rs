use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::sections::extract_sections;
use super::session::{deliver_delta, SessionState};
use super::{GovernanceError, GovernanceVariable};
use crate::model::{estimate_tokens, EngineConfig};
use crate::providers::{cosine, tokenize, CompletionProvider, CompletionRequest, EmbeddingProvider, PromptKind};

const MAX_SUPPLEMENTARY: usize = 5;
const FULL_ROUTE_TEMPERATURE: f64 = 0.2;
const PROMOTED_ON_EMPTY_CRITICAL: usize = 2;
const AUTO_FULL_MAX_LIBRARY: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouteMode {
    Fast,
    Full,
    #[default]
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeliveryMode {
    #[default]
    Full,
    Section,
}

/// A routing decision before any text is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Selection {
    pub variable_id: String,
    pub critical: bool,
    pub mode: DeliveryMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sections: Vec<String>,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CriticalItem {
    pub variable_id: String,
    pub name: String,
    pub version: u32,
    pub mode: DeliveryMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section_titles: Option<Vec<String>>,
    pub resolved_text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SupplementaryItem {
    pub variable_id: String,
    pub name: String,
    pub description: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RoutedContext {
    pub mode: RouteMode,
    pub critical: Vec<CriticalItem>,
    pub supplementary: Vec<SupplementaryItem>,
    pub token_count: usize,
    /// Full routing was requested but fell back to the fast path.
    #[serde(default)]
    pub degraded: bool,
    /// Critical items dropped because the session already holds them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub already_delivered: Vec<String>,
}

impl RoutedContext {
    /// Critical text as one block with a delimiter line per variable.
    pub fn compile(&self) -> String {
        let mut out = String::new();
        for c in &self.critical {
            out.push_str(&format!("--- [{}] (v{}) ---\n", c.name, c.version));
            out.push_str(&c.resolved_text);
            if !c.resolved_text.ends_with('\n') {
                out.push('\n');
            }
        }
        out
    }

    pub(crate) fn recount(&mut self) {
        self.token_count = self.critical.iter().map(|c| c.token_count).sum();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteOptions {
    pub prefilter_k: usize,
    pub prefilter_min_score: f64,
}

impl Default for RouteOptions {
    fn default() -> Self {
        Self {
            prefilter_k: 12,
            prefilter_min_score: 0.30,
        }
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "how", "in", "is", "it", "of", "on", "or",
    "our", "should", "that", "the", "this", "to", "we", "what", "when", "with", "you", "your",
];

fn content_tokens(text: &str) -> BTreeSet<String> {
    tokenize(text)
        .filter(|t| t.chars().count() > 1 && !STOPWORDS.contains(&t.as_str()))
        .collect()
}

pub(crate) fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

fn embedding_similarity(task: &[f32], v: &GovernanceVariable) -> f64 {
    let mut best = v.content_embedding.as_ref().map_or(0.0, |e| cosine(task, e));
    for h in &v.hype_embeddings {
        best = best.max(cosine(task, h));
    }
    best
}

fn trigger_hit(v: &GovernanceVariable, task_tokens: &BTreeSet<String>, task_norm: &str) -> bool {
    v.trigger_keywords.iter().any(|k| {
        let k = k.trim().to_lowercase();
        if k.contains(' ') {
            task_norm.contains(&format!(" {k} "))
        } else {
            task_tokens.contains(&k)
        }
    })
}

/// Composite fast-path relevance score, clamped to `[0, 1]`.
pub(crate) fn fast_score(
    v: &GovernanceVariable,
    task_emb: &[f32],
    task_tokens: &BTreeSet<String>,
    task_norm: &str,
    cfg: &EngineConfig,
) -> f64 {
    let emb = embedding_similarity(task_emb, v);
    let kw = jaccard(task_tokens, &content_tokens(&v.metadata_text()));
    let boost = if trigger_hit(v, task_tokens, task_norm) {
        cfg.fast_route_trigger_boost
    } else {
        0.0
    };
    (cfg.fast_route_embedding_weight * emb + cfg.fast_route_keyword_weight * kw + boost).clamp(0.0, 1.0)
}

fn critical_cap(n: usize) -> usize {
    n.div_ceil(5).clamp(2, 5)
}

/// Scores every variable and splits the ranking into critical and
/// supplementary selections. Makes no completion calls.
pub fn fast_selections(
    task: &str,
    library: &[GovernanceVariable],
    embedder: &dyn EmbeddingProvider,
    cfg: &EngineConfig,
) -> Result<Vec<Selection>, GovernanceError> {
    if library.is_empty() {
        return Err(GovernanceError::EmptyLibrary);
    }
    let task_emb = embedder.embed_one(task)?;
    let task_tokens = content_tokens(task);
    let task_norm = format!(" {} ", tokenize(task).collect::<Vec<_>>().join(" "));
    let mut out = Vec::new();
    let mut ranked = Vec::new();
    for v in library {
        let s = fast_score(v, &task_emb, &task_tokens, &task_norm, cfg);
        if v.always_on {
            out.push(Selection {
                variable_id: v.id.clone(),
                critical: true,
                mode: DeliveryMode::Full,
                sections: Vec::new(),
                score: s,
                reasoning: Some("always on".into()),
            });
        } else {
            ranked.push((v, s));
        }
    }
    out.sort_by(|a, b| a.variable_id.cmp(&b.variable_id));
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.id.cmp(&b.0.id)));
    let cap = critical_cap(library.len());
    let mut critical = 0;
    let mut supplementary = 0;
    for (v, s) in ranked {
        if critical < cap && s >= cfg.fast_route_critical_cutoff {
            critical += 1;
            out.push(Selection {
                variable_id: v.id.clone(),
                critical: true,
                mode: DeliveryMode::Full,
                sections: Vec::new(),
                score: s,
                reasoning: None,
            });
        } else if supplementary < MAX_SUPPLEMENTARY && s > 0.0 {
            supplementary += 1;
            out.push(Selection {
                variable_id: v.id.clone(),
                critical: false,
                mode: DeliveryMode::Full,
                sections: Vec::new(),
                score: s,
                reasoning: None,
            });
        }
    }
    Ok(out)
}

/// Resolves selections into text without consulting any session.
pub(crate) fn resolve(selections: &[Selection], library: &[GovernanceVariable], mode: RouteMode, cfg: &EngineConfig) -> RoutedContext {
    let mut ctx = RoutedContext {
        mode,
        critical: Vec::new(),
        supplementary: Vec::new(),
        token_count: 0,
        degraded: false,
        already_delivered: Vec::new(),
    };
    for s in selections {
        let Some(v) = library.iter().find(|v| v.id == s.variable_id) else { continue };
        if s.critical {
            let (mode, titles) = match s.mode {
                DeliveryMode::Section if !s.sections.is_empty() => (DeliveryMode::Section, Some(s.sections.clone())),
                _ => (DeliveryMode::Full, None),
            };
            let text = match &titles {
                Some(t) => extract_sections(&v.content, &v.headings, t),
                None => v.content.clone(),
            };
            ctx.critical.push(CriticalItem {
                variable_id: v.id.clone(),
                name: v.name.clone(),
                version: v.version,
                mode,
                section_titles: titles,
                token_count: estimate_tokens(&text, cfg.token_chars_per_token),
                resolved_text: text,
            });
        } else {
            ctx.supplementary.push(SupplementaryItem {
                variable_id: v.id.clone(),
                name: v.name.clone(),
                description: v.description.clone(),
                reason: s
                    .reasoning
                    .clone()
                    .unwrap_or_else(|| format!("relevance {:.3}", s.score)),
            });
        }
    }
    ctx.recount();
    ctx
}

fn finish(
    mut ctx: RoutedContext,
    library: &[GovernanceVariable],
    session: Option<&mut SessionState>,
    cfg: &EngineConfig,
) -> Result<RoutedContext, GovernanceError> {
    if let Some(s) = session {
        let degraded = ctx.degraded;
        ctx = deliver_delta(&ctx, s, library, cfg)?;
        ctx.degraded = degraded;
    }
    Ok(ctx)
}

pub fn fast_route(
    task: &str,
    library: &[GovernanceVariable],
    session: Option<&mut SessionState>,
    embedder: &dyn EmbeddingProvider,
    cfg: &EngineConfig,
) -> Result<RoutedContext, GovernanceError> {
    let sel = fast_selections(task, library, embedder, cfg)?;
    finish(resolve(&sel, library, RouteMode::Fast, cfg), library, session, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PrefilterHit {
    pub variable_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Keeps variables without an embedding, plus those scoring at least
/// `min_score` or ranking in the top `k`. Scored hits come first, best first.
pub fn embedding_prefilter(
    task_emb: &[f32],
    library: &[GovernanceVariable],
    k: usize,
    min_score: f64,
) -> Vec<PrefilterHit> {
    let mut scored: Vec<(&GovernanceVariable, f64)> = Vec::new();
    let mut bare = Vec::new();
    for v in library {
        if v.content_embedding.is_none() && v.hype_embeddings.is_empty() {
            bare.push(PrefilterHit {
                variable_id: v.id.clone(),
                score: None,
            });
        } else {
            scored.push((v, embedding_similarity(task_emb, v)));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.id.cmp(&b.0.id)));
    let mut out: Vec<PrefilterHit> = scored
        .into_iter()
        .enumerate()
        .filter(|(rank, (_, s))| *rank < k || *s >= min_score)
        .map(|(_, (v, s))| PrefilterHit {
            variable_id: v.id.clone(),
            score: Some(s),
        })
        .collect();
    bare.sort_by(|a, b| a.variable_id.cmp(&b.variable_id));
    out.extend(bare);
    out
}

fn parse_selections(resp: &Value, candidates: &HashSet<&str>) -> Option<Vec<Selection>> {
    let arr = resp.get("selections")?.as_array()?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (rank, s) in arr.iter().enumerate() {
        let Some(id) = s["variableId"].as_str() else { continue };
        if !candidates.contains(id) || !seen.insert(id.to_string()) {
            continue;
        }
        let critical = match s["priority"].as_str() {
            Some("critical") => true,
            Some("supplementary") => false,
            _ => continue,
        };
        let sections: Vec<String> = s["sections"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|t| t.as_str())
            .map(str::to_string)
            .collect();
        let mode = match s["mode"].as_str() {
            Some("section") if !sections.is_empty() => DeliveryMode::Section,
            _ => DeliveryMode::Full,
        };
        out.push(Selection {
            variable_id: id.to_string(),
            critical,
            mode,
            sections: if mode == DeliveryMode::Section { sections } else { Vec::new() },
            score: 1.0 - rank as f64 / arr.len().max(1) as f64,
            reasoning: s["reasoning"].as_str().map(str::to_string),
        });
    }
    Some(out)
}

/// Embedding pre-filter followed by one structured analysis call. Falls back
/// to the fast path when the provider fails or answers out of contract.
#[allow(clippy::too_many_arguments)]
pub fn full_route(
    task: &str,
    library: &[GovernanceVariable],
    session: Option<&mut SessionState>,
    embedder: &dyn EmbeddingProvider,
    completer: &dyn CompletionProvider,
    cfg: &EngineConfig,
    opts: RouteOptions,
) -> Result<RoutedContext, GovernanceError> {
    if library.is_empty() {
        return Err(GovernanceError::EmptyLibrary);
    }
    let task_emb = embedder.embed_one(task)?;
    let hits = embedding_prefilter(&task_emb, library, opts.prefilter_k, opts.prefilter_min_score);
    let candidates: Vec<Value> = hits
        .iter()
        .filter_map(|h| library.iter().find(|v| v.id == h.variable_id))
        .map(|v| {
            json!({
                "id": v.id,
                "name": v.name,
                "description": v.description,
                "tags": v.tags,
                "headings": v.headings.iter().map(|h| h.title.clone()).collect::<Vec<_>>(),
            })
        })
        .collect();
    let ids: HashSet<&str> = hits.iter().map(|h| h.variable_id.as_str()).collect();
    let req = CompletionRequest::new(
        PromptKind::FullRouteAnalysis,
        json!({"task": task, "candidates": candidates}),
        FULL_ROUTE_TEMPERATURE,
    );
    let parsed = match completer.complete(&req) {
        Ok(resp) => parse_selections(&resp, &ids),
        Err(e) => {
            tracing::warn!(error = %e, "full routing failed, using fast path");
            None
        }
    };
    let Some(mut selections) = parsed else {
        let sel = fast_selections(task, library, embedder, cfg)?;
        let mut ctx = resolve(&sel, library, RouteMode::Fast, cfg);
        ctx.degraded = true;
        return finish(ctx, library, session, cfg);
    };
    if !selections.iter().any(|s| s.critical) {
        for s in selections.iter_mut().take(PROMOTED_ON_EMPTY_CRITICAL) {
            s.critical = true;
        }
    }
    let mut always: Vec<&GovernanceVariable> = library
        .iter()
        .filter(|v| v.always_on && !selections.iter().any(|s| s.variable_id == v.id))
        .collect();
    always.sort_by(|a, b| a.id.cmp(&b.id));
    for v in always {
        selections.push(Selection {
            variable_id: v.id.clone(),
            critical: true,
            mode: DeliveryMode::Full,
            sections: Vec::new(),
            score: 1.0,
            reasoning: Some("always on".into()),
        });
    }
    finish(resolve(&selections, library, RouteMode::Full, cfg), library, session, cfg)
}

/// Dispatches on `mode`; `auto` takes the full path only for libraries of at
/// most 15 variables and when a completion provider is available.
pub fn route_governance(
    task: &str,
    library: &[GovernanceVariable],
    session: Option<&mut SessionState>,
    mode: RouteMode,
    embedder: &dyn EmbeddingProvider,
    completer: Option<&dyn CompletionProvider>,
    cfg: &EngineConfig,
) -> Result<RoutedContext, GovernanceError> {
    let resolved = match (mode, completer) {
        (RouteMode::Auto, Some(_)) if library.len() <= AUTO_FULL_MAX_LIBRARY => RouteMode::Full,
        (RouteMode::Auto, _) => RouteMode::Fast,
        (m, _) => m,
    };
    match (resolved, completer) {
        (RouteMode::Full, Some(c)) => full_route(task, library, session, embedder, c, cfg, RouteOptions::default()),
        (RouteMode::Full, None) => {
            let mut ctx = fast_route(task, library, session, embedder, cfg)?;
            ctx.degraded = true;
            Ok(ctx)
        }
        _ => fast_route(task, library, session, embedder, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::governance::enrich_variable;
    use crate::providers::{HashEmbedder, Matcher, ScriptedCompleter};

    fn lib(e: &HashEmbedder) -> Vec<GovernanceVariable> {
        let raw = vec![
            GovernanceVariable::new("v1", "o", "Pricing policy", "discount approval rules", &["pricing"], "# Discounts\nMax 20%.\n# Approvals\nVP signs.\n"),
            GovernanceVariable::new("v2", "o", "Support tone", "empathetic support replies", &["support"], "Be kind.\n"),
            GovernanceVariable::new("v3", "o", "Security rules", "data handling", &["security"], "Encrypt.\n"),
        ];
        raw.into_iter().map(|v| enrich_variable(v, None, e).unwrap()).collect()
    }

    #[test]
    fn jaccard_oracle() {
        let a: BTreeSet<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let b: BTreeSet<String> = ["y", "z", "w", "v"].iter().map(|s| s.to_string()).collect();
        assert!((jaccard(&a, &b) - 2.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn always_on_is_critical_and_no_calls() {
        let e = HashEmbedder::new(256);
        let mut l = lib(&e);
        l[2].always_on = true;
        let ctx = fast_route("write a haiku about autumn", &l, None, &e, &EngineConfig::default()).unwrap();
        assert!(ctx.critical.iter().any(|c| c.variable_id == "v3"));
        assert_eq!(ctx.mode, RouteMode::Fast);
        assert!(fast_route("x", &[], None, &e, &EngineConfig::default()).is_err());
    }

    #[test]
    fn full_route_promotes_and_falls_back() {
        let e = HashEmbedder::new(256);
        let l = lib(&e);
        let cfg = EngineConfig::default();
        let c = ScriptedCompleter::builder()
            .always(
                PromptKind::FullRouteAnalysis,
                json!({"selections": [
                    {"variableId": "v2", "priority": "supplementary"},
                    {"variableId": "v1", "priority": "supplementary", "mode": "section", "sections": ["Approvals"]},
                    {"variableId": "v3", "priority": "supplementary"}
                ]}),
            )
            .build();
        let ctx = full_route("task", &l, None, &e, &c, &cfg, RouteOptions::default()).unwrap();
        let ids: Vec<&str> = ctx.critical.iter().map(|c| c.variable_id.as_str()).collect();
        assert_eq!(ids, vec!["v2", "v1"]);
        assert_eq!(ctx.critical[1].resolved_text, "# Approvals\nVP signs.\n");
        assert_eq!(ctx.supplementary.len(), 1);

        let failing = ScriptedCompleter::builder()
            .fail(PromptKind::FullRouteAnalysis, Matcher::Any, "down")
            .build();
        let ctx = full_route("pricing discount", &l, None, &e, &failing, &cfg, RouteOptions::default()).unwrap();
        assert_eq!(ctx.mode, RouteMode::Fast);
        assert!(ctx.degraded);
    }

    #[test]
    fn prefilter_rules() {
        let e = HashEmbedder::new(256);
        let mut l = Vec::new();
        for i in 0..30 {
            let mut v = GovernanceVariable::new(&format!("v{i:02}"), "o", &format!("topic{i}"), "", &[], "body");
            v.content_embedding = Some(e.embed_text(&format!("zz{i} unrelated")));
            l.push(v);
        }
        l.push(GovernanceVariable::new("bare", "o", "n", "", &[], "body"));
        let q = e.embed_text("something else entirely");
        let hits = embedding_prefilter(&q, &l, 12, 0.30);
        assert_eq!(hits.len(), 13);
        assert_eq!(hits.last().unwrap().variable_id, "bare");
        assert!(embedding_prefilter(&q, &[], 12, 0.3).is_empty());
    }

    #[test]
    fn auto_mode_branches() {
        let e = HashEmbedder::new(256);
        let cfg = EngineConfig::default();
        let c = ScriptedCompleter::default();
        let mut big = Vec::new();
        for i in 0..40 {
            big.push(GovernanceVariable::new(&format!("v{i}"), "o", "n", "", &[], "b"));
        }
        let ctx = route_governance("t", &big, None, RouteMode::Auto, &e, Some(&c), &cfg).unwrap();
        assert_eq!(ctx.mode, RouteMode::Fast);
        assert_eq!(c.total_calls(), 0);
        let small = lib(&e);
        let ctx = route_governance("t", &small, None, RouteMode::Auto, &e, Some(&c), &cfg).unwrap();
        assert_eq!(ctx.mode, RouteMode::Full);
        assert_eq!(c.calls(PromptKind::FullRouteAnalysis), 1);
    }
}
