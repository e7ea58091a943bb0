//! Query-time retrieval: entity-scoped search, bounded reflection, recency
//! ranking, answer synthesis and the token-budgeted entity context block.

use std::collections::{BTreeMap, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::model::{estimate_tokens, resolve_entity, CrmKeys, EngineConfig, MemoryEntry, MemoryType, ModelError};
use crate::providers::{CompletionProvider, CompletionRequest, EmbeddingProvider, PromptKind, ProviderError};
use crate::store::{MemoryStore, RetrievalFilter, ScoredEntry, StoreError};

const MAX_FOLLOWUPS_PER_ROUND: usize = 2;
const SYNTHESIS_TEMPERATURE: f64 = 0.2;
const SYNTHESIS_CONTEXT_RESULTS: usize = 10;
const JUDGE_CONTEXT_RESULTS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("invalid retrieval request: {0}")]
    InvalidRequest(String),
    #[error("a completion provider is required for {0}")]
    CompleterRequired(&'static str),
    #[error("no entity matches the given keys")]
    EntityNotFound,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct RetrievalRequest {
    pub org_id: String,
    pub query: String,
    /// Additional caller-written queries searched in the first pass.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub extra_queries: Vec<String>,
    pub k: usize,
    pub filter: RetrievalFilter,
    pub reflect: bool,
    /// Reflection rounds; the configured bound when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_rounds: Option<usize>,
    pub recency_decay: bool,
    pub synthesize: bool,
}

impl Default for RetrievalRequest {
    fn default() -> Self {
        Self {
            org_id: String::new(),
            query: String::new(),
            extra_queries: Vec::new(),
            k: 10,
            filter: RetrievalFilter::default(),
            reflect: false,
            max_rounds: None,
            recency_decay: true,
            synthesize: false,
        }
    }
}

impl RetrievalRequest {
    pub fn new(org_id: &str, query: &str, k: usize) -> Self {
        Self {
            org_id: org_id.to_string(),
            query: query.to_string(),
            k,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RankedEntry {
    pub entry: MemoryEntry,
    pub final_score: f64,
    pub raw_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Answer {
    pub text: String,
    pub source_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stripped_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RetrievalResult {
    pub results: Vec<RankedEntry>,
    pub rounds: usize,
    pub followup_queries: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<Answer>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// `2^(-age/half_life)` with age in fractional days, never negative.
pub fn recency_factor(effective: DateTime<Utc>, now: DateTime<Utc>, half_life_days: f64) -> f64 {
    let age_days = ((now - effective).num_milliseconds() as f64 / 86_400_000.0).max(0.0);
    (-age_days / half_life_days).exp2()
}

/// Union of hits keyed by entry id, keeping each entry's best similarity.
#[derive(Default)]
struct Pool(BTreeMap<String, ScoredEntry>);

impl Pool {
    fn merge(&mut self, hits: Vec<ScoredEntry>) {
        for h in hits {
            match self.0.get_mut(&h.entry.id) {
                Some(cur) if cur.similarity >= h.similarity => {}
                Some(cur) => *cur = h,
                None => {
                    self.0.insert(h.entry.id.clone(), h);
                }
            }
        }
    }

    fn ranked_raw(&self) -> Vec<&ScoredEntry> {
        let mut v: Vec<&ScoredEntry> = self.0.values().collect();
        v.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then(b.entry.created_at.cmp(&a.entry.created_at))
                .then(a.entry.id.cmp(&b.entry.id))
        });
        v
    }
}

fn evidence(hits: &[&ScoredEntry], n: usize) -> Value {
    Value::Array(
        hits.iter()
            .take(n)
            .map(|h| json!({"id": h.entry.id, "text": h.entry.text, "similarity": h.similarity}))
            .collect(),
    )
}

fn search_all(
    store: &MemoryStore,
    embedder: &dyn EmbeddingProvider,
    req: &RetrievalRequest,
    queries: &[String],
) -> Result<Vec<ScoredEntry>, RetrievalError> {
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let vectors = embedder.embed(queries)?;
    let mut out = Vec::new();
    for v in vectors {
        out.extend(store.search(&req.org_id, &v, req.k, &req.filter)?);
    }
    Ok(out)
}

/// One reflection step: judge, then ask for follow-ups. `None` means stop.
fn reflect_once(
    completer: &dyn CompletionProvider,
    query: &str,
    pool: &Pool,
    cfg: &EngineConfig,
) -> Result<Option<Vec<String>>, ProviderError> {
    let ev = evidence(&pool.ranked_raw(), JUDGE_CONTEXT_RESULTS);
    let verdict = completer.complete(&CompletionRequest::new(
        PromptKind::CompletenessJudge,
        json!({"query": query, "results": ev}),
        cfg.completeness_temperature,
    ))?;
    if verdict["complete"].as_bool().unwrap_or(true) {
        return Ok(None);
    }
    let missing = verdict.get("missing").cloned().unwrap_or(Value::Array(Vec::new()));
    let resp = completer.complete(&CompletionRequest::new(
        PromptKind::FollowupQueries,
        json!({"query": query, "results": ev, "missing": missing}),
        cfg.followup_temperature,
    ))?;
    let queries: Vec<String> = resp["queries"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|q| q.as_str())
        .map(|q| q.trim().to_string())
        .filter(|q| !q.is_empty())
        .take(MAX_FOLLOWUPS_PER_ROUND)
        .collect();
    Ok((!queries.is_empty()).then_some(queries))
}

/// Searches, optionally reflects, ranks and synthesizes.
///
/// Every search inherits the request filter. The result list is the union
/// of all rounds (each search capped at `k`), ranked by final score.
pub fn retrieve(
    req: &RetrievalRequest,
    store: &MemoryStore,
    embedder: &dyn EmbeddingProvider,
    completer: Option<&dyn CompletionProvider>,
    cfg: &EngineConfig,
) -> Result<RetrievalResult, RetrievalError> {
    if req.org_id.is_empty() {
        return Err(RetrievalError::Store(StoreError::MissingOrgId));
    }
    if req.query.trim().is_empty() {
        return Err(RetrievalError::InvalidRequest("query is empty".into()));
    }
    let max_rounds = req.max_rounds.unwrap_or(cfg.reflection_max_rounds);
    if max_rounds > cfg.reflection_max_rounds {
        return Err(RetrievalError::InvalidRequest(format!(
            "maxRounds {max_rounds} exceeds the configured bound {}",
            cfg.reflection_max_rounds
        )));
    }
    if req.reflect && completer.is_none() {
        return Err(RetrievalError::CompleterRequired("reflection"));
    }
    if req.synthesize && completer.is_none() {
        return Err(RetrievalError::CompleterRequired("answer synthesis"));
    }

    let mut queries = vec![req.query.clone()];
    queries.extend(req.extra_queries.iter().filter(|q| !q.trim().is_empty()).cloned());
    let mut pool = Pool::default();
    pool.merge(search_all(store, embedder, req, &queries)?);
    let mut result = RetrievalResult {
        results: Vec::new(),
        rounds: 1,
        followup_queries: Vec::new(),
        answer: None,
        warnings: Vec::new(),
    };

    if let (true, Some(c)) = (req.reflect, completer) {
        while result.rounds <= max_rounds {
            let followups = match reflect_once(c, &req.query, &pool, cfg) {
                Ok(Some(q)) => q,
                Ok(None) => break,
                Err(e) => {
                    result.warnings.push(format!("reflection stopped: {e}"));
                    break;
                }
            };
            match search_all(store, embedder, req, &followups) {
                Ok(hits) => pool.merge(hits),
                Err(RetrievalError::Provider(e)) => {
                    result.warnings.push(format!("follow-up embedding failed: {e}"));
                    break;
                }
                Err(e) => return Err(e),
            }
            result.followup_queries.extend(followups);
            result.rounds += 1;
        }
    }

    let now = store.now();
    result.results = pool
        .0
        .into_values()
        .map(|h| {
            let factor = if req.recency_decay {
                recency_factor(h.entry.effective_time(), now, cfg.recency_half_life_days)
            } else {
                1.0
            };
            RankedEntry {
                final_score: h.similarity * factor,
                raw_similarity: h.similarity,
                entry: h.entry,
            }
        })
        .collect();
    rank(&mut result.results);

    if let (true, Some(c)) = (req.synthesize, completer) {
        if !result.results.is_empty() {
            match synthesize_answer(&req.query, &result.results, c) {
                Ok(a) => {
                    if !a.stripped_ids.is_empty() {
                        result.warnings.push(format!("answer cited unknown ids {:?}", a.stripped_ids));
                    }
                    result.answer = Some(a);
                }
                Err(e) => result.warnings.push(format!("answer synthesis failed: {e}")),
            }
        }
    }
    for w in &result.warnings {
        tracing::warn!(org = %req.org_id, "{w}");
    }
    Ok(result)
}

/// Final score desc, then newer creation, then id.
pub fn rank(results: &mut [RankedEntry]) {
    results.sort_by(|a, b| {
        b.final_score
            .total_cmp(&a.final_score)
            .then(b.entry.created_at.cmp(&a.entry.created_at))
            .then(a.entry.id.cmp(&b.entry.id))
    });
}

/// Answer over the top results; cited ids not among them are stripped.
pub fn synthesize_answer(
    query: &str,
    results: &[RankedEntry],
    completer: &dyn CompletionProvider,
) -> Result<Answer, RetrievalError> {
    if results.is_empty() {
        return Err(RetrievalError::InvalidRequest("synthesis needs at least one result".into()));
    }
    let ctx: Vec<Value> = results
        .iter()
        .take(SYNTHESIS_CONTEXT_RESULTS)
        .map(|r| json!({"id": r.entry.id, "text": r.entry.text, "score": r.final_score}))
        .collect();
    let resp = completer.complete(&CompletionRequest::new(
        PromptKind::AnswerSynthesis,
        json!({"query": query, "results": ctx}),
        SYNTHESIS_TEMPERATURE,
    ))?;
    let text = resp["text"]
        .as_str()
        .ok_or_else(|| ProviderError::Malformed("answer without text".into()))?
        .to_string();
    let known: HashSet<&str> = results.iter().map(|r| r.entry.id.as_str()).collect();
    let mut source_ids = Vec::new();
    let mut stripped_ids = Vec::new();
    for id in resp["sourceIds"].as_array().into_iter().flatten().filter_map(|v| v.as_str()) {
        if known.contains(id) {
            if !source_ids.iter().any(|s| s == id) {
                source_ids.push(id.to_string());
            }
        } else {
            stripped_ids.push(id.to_string());
        }
    }
    Ok(Answer {
        text,
        source_ids,
        stripped_ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EntityContext {
    pub record_id: String,
    pub text: String,
    pub included_property_ids: Vec<String>,
    pub included_memory_ids: Vec<String>,
    pub tokens_used: usize,
}

fn property_line(e: &MemoryEntry) -> String {
    let name = e.property_name.as_deref().or(e.system_name.as_deref()).unwrap_or("property");
    let value = e.property_value.as_deref().unwrap_or(&e.text);
    match e.confidence {
        Some(c) => format!("{name}: {value} ({c:.2})\n"),
        None => format!("{name}: {value}\n"),
    }
}

/// Properties then observations for one entity, admitted greedily while the
/// whole block stays within `token_budget`. No observation is admitted until
/// every property is in; the first item that does not fit ends the block.
///
/// `property_order` lists property ids in declaration order; unlisted
/// properties follow by name.
pub fn entity_context(
    store: &MemoryStore,
    org_id: &str,
    keys: &CrmKeys,
    token_budget: usize,
    property_order: &[String],
    cfg: &EngineConfig,
) -> Result<EntityContext, RetrievalError> {
    let record_id = resolve_entity(keys, store, org_id)?.ok_or(RetrievalError::EntityNotFound)?;
    let entries: Vec<MemoryEntry> = store
        .list(org_id)
        .into_iter()
        .filter(|e| e.record_id.as_deref() == Some(record_id.as_str()))
        .collect();
    let position = |e: &MemoryEntry| {
        e.property_id
            .as_ref()
            .and_then(|p| property_order.iter().position(|o| o == p))
            .unwrap_or(usize::MAX)
    };
    let mut props: Vec<&MemoryEntry> = entries.iter().filter(|e| e.entry_type == MemoryType::PropertyValue).collect();
    props.sort_by(|a, b| {
        position(a)
            .cmp(&position(b))
            .then(a.property_name.cmp(&b.property_name))
            .then(b.effective_time().cmp(&a.effective_time()))
            .then(a.id.cmp(&b.id))
    });
    let mut obs: Vec<&MemoryEntry> = entries.iter().filter(|e| e.entry_type == MemoryType::Memory).collect();
    obs.sort_by(|a, b| b.effective_time().cmp(&a.effective_time()).then(a.id.cmp(&b.id)));

    let mut ctx = EntityContext {
        record_id,
        text: String::new(),
        included_property_ids: Vec::new(),
        included_memory_ids: Vec::new(),
        tokens_used: 0,
    };
    let cpt = cfg.token_chars_per_token;
    let sections: [(&str, &[&MemoryEntry], bool); 2] = [("## Properties\n", &props, true), ("## Observations\n", &obs, false)];
    'outer: for (header, items, is_prop) in sections {
        let mut opened = false;
        for e in items.iter() {
            let line = if is_prop { property_line(e) } else { format!("- {}\n", e.text) };
            let mut candidate = ctx.text.clone();
            if !opened {
                if !candidate.is_empty() {
                    candidate.push('\n');
                }
                candidate.push_str(header);
            }
            candidate.push_str(&line);
            let tokens = estimate_tokens(&candidate, cpt);
            if tokens > token_budget {
                break 'outer;
            }
            opened = true;
            ctx.text = candidate;
            ctx.tokens_used = tokens;
            if is_prop {
                ctx.included_property_ids.push(e.property_id.clone().unwrap_or_else(|| e.id.clone()));
            } else {
                ctx.included_memory_ids.push(e.id.clone());
            }
        }
    }
    Ok(ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{reference_epoch, ManualClock};
    use crate::providers::{HashEmbedder, Matcher, ScriptedCompleter};
    use chrono::Duration;
    use std::sync::Arc;

    fn setup() -> (MemoryStore, HashEmbedder) {
        let clock = Arc::new(ManualClock::new(reference_epoch()));
        (MemoryStore::with_clock(256, clock), HashEmbedder::new(256))
    }

    fn put(s: &MemoryStore, e: &HashEmbedder, id: &str, rec: &str, text: &str, age_days: i64) {
        let t = reference_epoch() - Duration::days(age_days);
        let m = MemoryEntry::fact(id, "o", text, t).with_record(rec);
        s.upsert(m, e.embed_one(text).unwrap()).unwrap();
    }

    #[test]
    fn half_life_halves() {
        let now = reference_epoch();
        assert!((recency_factor(now - Duration::days(38), now, 38.0) - 0.5).abs() < 1e-12);
        assert_eq!(recency_factor(now + Duration::days(3), now, 38.0), 1.0);
    }

    #[test]
    fn no_reflection_single_round() {
        let (s, e) = setup();
        put(&s, &e, "a", "r1", "Acme renewal is in March", 1);
        let c = ScriptedCompleter::default();
        let r = retrieve(&RetrievalRequest::new("o", "renewal", 5), &s, &e, Some(&c), &EngineConfig::default()).unwrap();
        assert_eq!(r.rounds, 1);
        assert_eq!(c.total_calls(), 0);
        assert_eq!(r.results[0].entry.id, "a");
    }

    #[test]
    fn reflection_is_bounded_and_scoped() {
        let (s, e) = setup();
        put(&s, &e, "a", "r1", "Acme renewal is in March", 1);
        put(&s, &e, "b", "r1", "Acme budget owner is Dana", 1);
        put(&s, &e, "x", "r2", "Other renewal in May", 1);
        let c = ScriptedCompleter::builder()
            .always(PromptKind::CompletenessJudge, json!({"complete": false, "missing": ["budget"]}))
            .always(PromptKind::FollowupQueries, json!({"queries": ["budget owner", "renewal date", "third"]}))
            .build();
        let mut req = RetrievalRequest::new("o", "renewal", 1);
        req.reflect = true;
        req.filter = RetrievalFilter::record("r1");
        let cfg = EngineConfig::default();
        let r = retrieve(&req, &s, &e, Some(&c), &cfg).unwrap();
        assert_eq!(r.rounds, 1 + cfg.reflection_max_rounds);
        assert_eq!(r.followup_queries.len(), 4);
        assert!(r.results.iter().all(|x| x.entry.record_id.as_deref() == Some("r1")));
        assert_eq!(c.calls(PromptKind::CompletenessJudge), 2);
        req.max_rounds = Some(3);
        assert!(matches!(retrieve(&req, &s, &e, Some(&c), &cfg), Err(RetrievalError::InvalidRequest(_))));
    }

    #[test]
    fn reflection_failure_degrades() {
        let (s, e) = setup();
        put(&s, &e, "a", "r1", "Acme renewal is in March", 1);
        let c = ScriptedCompleter::builder()
            .fail(PromptKind::CompletenessJudge, Matcher::Any, "down")
            .build();
        let mut req = RetrievalRequest::new("o", "renewal", 3);
        req.reflect = true;
        let r = retrieve(&req, &s, &e, Some(&c), &EngineConfig::default()).unwrap();
        assert_eq!(r.rounds, 1);
        assert_eq!(r.results.len(), 1);
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn synthesis_strips_unknown_ids() {
        let (s, e) = setup();
        put(&s, &e, "a", "r1", "Acme renewal is in March", 1);
        put(&s, &e, "b", "r1", "Acme renewal owner is Dana", 1);
        let c = ScriptedCompleter::builder()
            .always(PromptKind::AnswerSynthesis, json!({"text": "March", "sourceIds": ["a", "ghost", "b"]}))
            .build();
        let mut req = RetrievalRequest::new("o", "renewal", 5);
        req.synthesize = true;
        let r = retrieve(&req, &s, &e, Some(&c), &EngineConfig::default()).unwrap();
        let a = r.answer.unwrap();
        assert_eq!(a.source_ids, vec!["a", "b"]);
        assert_eq!(a.stripped_ids, vec!["ghost"]);
    }

    #[test]
    fn entity_context_budgets() {
        let (s, e) = setup();
        let mut p = MemoryEntry::fact("p1", "o", "Stage: won", reference_epoch()).with_record("r1");
        p.entry_type = MemoryType::PropertyValue;
        p.property_id = Some("prop-stage".into());
        p.property_name = Some("Stage".into());
        p.property_value = Some("won".into());
        p.confidence = Some(0.9);
        s.upsert(p, e.embed_one("Stage: won").unwrap()).unwrap();
        put(&s, &e, "m-old", "r1", "Met at a conference", 30);
        put(&s, &e, "m-new", "r1", "Asked for a demo", 2);
        let cfg = EngineConfig::default();
        let keys = CrmKeys::record("r1");
        let all = entity_context(&s, "o", &keys, 10_000, &[], &cfg).unwrap();
        assert_eq!(
            all.text,
            "## Properties\nStage: won (0.90)\n\n## Observations\n- Asked for a demo\n- Met at a conference\n"
        );
        let props_only = estimate_tokens("## Properties\nStage: won (0.90)\n", 4);
        let c = entity_context(&s, "o", &keys, props_only, &[], &cfg).unwrap();
        assert!(c.included_memory_ids.is_empty() && c.included_property_ids == vec!["prop-stage"]);
        let z = entity_context(&s, "o", &keys, 0, &[], &cfg).unwrap();
        assert_eq!((z.text.as_str(), z.tokens_used), ("", 0));
        assert!(matches!(
            entity_context(&s, "o", &CrmKeys::record("nobody"), 10, &[], &cfg),
            Err(RetrievalError::EntityNotFound)
        ));
    }
}
