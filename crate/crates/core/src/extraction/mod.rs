//! Dual extraction pipeline: open-set facts and schema-typed property values
//! from one completion per chunk, gated, deduplicated and written with
//! provenance.

mod chunk;
mod gates;

pub use chunk::{chunk, infer_mode, reconstruct, Chunk, ContentMode};
pub use gates::{quality_gates, FlaggedFacts, GateConfig, QualityGateReport};

use std::collections::{BTreeMap, HashMap, HashSet};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::model::{
    content_hash, resolve_entity, sha256_hex, CrmKeys, EngineConfig, ExtractionMethod, MemoryEntry, MemoryType,
    ModelError, Provenance, CRM_KEYS_ATTRIBUTE,
};
use crate::providers::{cosine, CompletionProvider, CompletionRequest, EmbeddingProvider, PromptKind, ProviderError};
use crate::redaction::{merge_audits, RedactionAudit, RedactionConfig, Redactor};
use crate::schema::{Schema, SchemaProperty, TypedValue};
use crate::store::{DedupScope, MemoryStore, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum ExtractionError {
    #[error("content is empty")]
    EmptyContent,
    #[error("orgId is required")]
    MissingOrgId,
    #[error("pipeline failed: {0}")]
    PipelineFailed(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

const EXTRACTION_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExtractedFact {
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub persons: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entities: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<DateTime<Utc>>,
    #[serde(default)]
    pub chunk_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    #[default]
    Replace,
    Accumulate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExtractedProperty {
    pub property_id: String,
    pub value: TypedValue,
    pub confidence: f64,
    pub update_mode: UpdateMode,
    pub chunk_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChunkExtraction {
    pub facts: Vec<ExtractedFact>,
    pub properties: Vec<ExtractedProperty>,
    pub validation_failures: Vec<String>,
}

/// Text embedded to judge a property's relevance to content.
pub fn property_metadata_text(p: &SchemaProperty) -> String {
    p.metadata_text()
}

/// Properties whose metadata embedding is at least `min_score` similar to
/// the content, best first (declaration order breaks ties), capped at `max_count`.
pub fn select_properties(
    content: &str,
    schema: &Schema,
    embedder: &dyn EmbeddingProvider,
    min_score: f64,
    max_count: usize,
) -> Result<Vec<(SchemaProperty, f64)>, ProviderError> {
    if schema.properties.is_empty() {
        return Ok(Vec::new());
    }
    let mut texts = vec![content.to_string()];
    texts.extend(schema.properties.iter().map(property_metadata_text));
    let vecs = embedder.embed(&texts)?;
    let mut scored: Vec<(usize, f64)> = vecs[1..]
        .iter()
        .enumerate()
        .map(|(i, v)| (i, cosine(&vecs[0], v)))
        .filter(|(_, s)| *s >= min_score)
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(max_count);
    Ok(scored
        .into_iter()
        .map(|(i, s)| (schema.properties[i].clone(), s))
        .collect())
}

fn string_list(v: &Value) -> Vec<String> {
    match v {
        Value::Array(items) => items
            .iter()
            .filter_map(|x| x.as_str())
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        _ => Vec::new(),
    }
}

fn opt_string(v: &Value) -> Option<String> {
    v.as_str().map(str::trim).filter(|s| !s.is_empty()).map(str::to_string)
}

fn parse_instant(s: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|d| d.with_timezone(&Utc))
        .ok()
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
                .map(|d| d.and_utc())
        })
}

fn parse_fact(raw: &Value, chunk_index: usize, failures: &mut Vec<String>) -> Option<ExtractedFact> {
    let (text, obj) = match raw {
        Value::String(s) => (s.trim().to_string(), None),
        Value::Object(o) => (o.get("text").and_then(|t| t.as_str()).unwrap_or("").trim().to_string(), Some(raw)),
        _ => (String::new(), None),
    };
    if text.is_empty() {
        failures.push(format!("chunk {chunk_index}: fact without text dropped"));
        return None;
    }
    let mut fact = ExtractedFact {
        text,
        keywords: Vec::new(),
        persons: Vec::new(),
        entities: Vec::new(),
        location: None,
        topic: None,
        timestamp: None,
        chunk_index,
    };
    if let Some(o) = obj {
        fact.keywords = string_list(&o["keywords"]);
        fact.persons = string_list(&o["persons"]);
        fact.entities = string_list(&o["entities"]);
        fact.location = opt_string(&o["location"]);
        fact.topic = opt_string(&o["topic"]);
        if let Some(ts) = opt_string(&o["timestamp"]) {
            fact.timestamp = parse_instant(&ts);
            if fact.timestamp.is_none() {
                failures.push(format!("chunk {chunk_index}: unparseable timestamp {ts:?} ignored"));
            }
        }
    }
    Some(fact)
}

fn parse_property(
    raw: &Value,
    offered: &[SchemaProperty],
    chunk_index: usize,
    failures: &mut Vec<String>,
) -> Option<ExtractedProperty> {
    let pid = raw["propertyId"].as_str().unwrap_or_default();
    let Some(prop) = offered.iter().find(|p| p.id == pid || p.system_name == pid) else {
        failures.push(format!("chunk {chunk_index}: property {pid:?} was not requested"));
        return None;
    };
    let value = match prop.coerce(&raw["value"]) {
        Ok(v) => v,
        Err(e) => {
            failures.push(format!("chunk {chunk_index}: {}: {e}", prop.system_name));
            return None;
        }
    };
    let Some(confidence) = raw["confidence"].as_f64().filter(|c| (0.0..=1.0).contains(c)) else {
        failures.push(format!(
            "chunk {chunk_index}: {}: confidence missing or outside [0,1]",
            prop.system_name
        ));
        return None;
    };
    let update_mode = match raw["updateMode"].as_str() {
        Some("accumulate") => UpdateMode::Accumulate,
        Some("replace") | None => UpdateMode::Replace,
        Some(other) => {
            failures.push(format!("chunk {chunk_index}: {}: unknown updateMode {other:?}", prop.system_name));
            return None;
        }
    };
    Some(ExtractedProperty {
        property_id: prop.id.clone(),
        value,
        confidence,
        update_mode,
        chunk_index,
    })
}

fn property_payload(p: &SchemaProperty) -> Value {
    json!({
        "id": p.id,
        "name": p.name,
        "systemName": p.system_name,
        "type": p.prop_type,
        "description": p.description,
        "extractionHints": p.extraction_hints,
        "options": p.options,
    })
}

/// One completion producing both facts and typed property values for a chunk.
pub fn dual_extract(
    chunk: &Chunk,
    properties: &[SchemaProperty],
    completer: &dyn CompletionProvider,
) -> Result<ChunkExtraction, ProviderError> {
    let payload = json!({
        "content": chunk.text,
        "mode": chunk.mode,
        "chunkIndex": chunk.index,
        "chunkTotal": chunk.total,
        "properties": properties.iter().map(property_payload).collect::<Vec<_>>(),
    });
    let resp = completer.complete(&CompletionRequest::new(
        PromptKind::DualExtract,
        payload,
        EXTRACTION_TEMPERATURE,
    ))?;
    if !resp.is_object() {
        return Err(ProviderError::Malformed("dualExtract response is not an object".into()));
    }
    let mut out = ChunkExtraction::default();
    for f in resp["facts"].as_array().into_iter().flatten() {
        if let Some(fact) = parse_fact(f, chunk.index, &mut out.validation_failures) {
            out.facts.push(fact);
        }
    }
    for p in resp["properties"].as_array().into_iter().flatten() {
        if let Some(prop) = parse_property(p, properties, chunk.index, &mut out.validation_failures) {
            out.properties.push(prop);
        }
    }
    for f in &out.validation_failures {
        tracing::warn!("extraction validation: {f}");
    }
    Ok(out)
}

/// Lowercase, whitespace collapsed, terminal punctuation stripped.
pub fn normalize_fact_text(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(|c: char| matches!(c, '.' | '!' | '?' | ';' | ':' | ','))
        .to_string()
}

/// Merges chunk outputs: facts by normalized text (first kept); single-value
/// properties keep the highest confidence (later chunk on ties); accumulating
/// properties keep every distinct value.
pub fn cross_chunk_dedup(
    facts: Vec<ExtractedFact>,
    props: Vec<ExtractedProperty>,
) -> (Vec<ExtractedFact>, Vec<ExtractedProperty>) {
    let mut seen = HashSet::new();
    let facts = facts
        .into_iter()
        .filter(|f| seen.insert(normalize_fact_text(&f.text)))
        .collect();
    let mut out: Vec<ExtractedProperty> = Vec::new();
    let mut replace_slot: HashMap<String, usize> = HashMap::new();
    let mut accum_slot: HashMap<(String, String), usize> = HashMap::new();
    for p in props {
        match p.update_mode {
            UpdateMode::Replace => match replace_slot.get(&p.property_id) {
                Some(&i) => {
                    let cur = &out[i];
                    if p.confidence > cur.confidence
                        || (p.confidence == cur.confidence && p.chunk_index >= cur.chunk_index)
                    {
                        out[i] = p;
                    }
                }
                None => {
                    replace_slot.insert(p.property_id.clone(), out.len());
                    out.push(p);
                }
            },
            UpdateMode::Accumulate => {
                let key = (p.property_id.clone(), p.value.to_string());
                match accum_slot.get(&key) {
                    Some(&i) if p.confidence > out[i].confidence => out[i] = p,
                    Some(_) => {}
                    None => {
                        accum_slot.insert(key, out.len());
                        out.push(p);
                    }
                }
            }
        }
    }
    (facts, out)
}

/// Per-request knobs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct MemorizeOptions {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ContentMode>,
    /// Absent means the default configuration (every tier, redact strategy).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub redaction: Option<RedactionConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gates: Option<GateConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MemorizeRequest {
    pub content: String,
    pub org_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crm_keys: Option<CrmKeys>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<Schema>,
    #[serde(default)]
    pub options: MemorizeOptions,
}

impl MemorizeRequest {
    pub fn new(org_id: &str, content: &str) -> Self {
        Self {
            content: content.to_string(),
            org_id: org_id.to_string(),
            crm_keys: None,
            schema: None,
            options: MemorizeOptions::default(),
        }
    }

    pub fn for_entity(mut self, keys: CrmKeys) -> Self {
        self.crm_keys = Some(keys);
        self
    }

    pub fn with_schema(mut self, schema: Schema) -> Self {
        self.schema = Some(schema);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChunkFailure {
    pub chunk_index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SkippedDuplicate {
    pub text: String,
    pub duplicate_of: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PipelineReport {
    pub org_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    pub mode: ContentMode,
    pub chunks: usize,
    pub candidates: usize,
    pub stored_facts: usize,
    pub stored_props: usize,
    pub skipped_duplicates: usize,
    pub stored_ids: Vec<String>,
    pub skipped: Vec<SkippedDuplicate>,
    pub dropped_by_gates: usize,
    pub gate_report: QualityGateReport,
    pub audits: Vec<RedactionAudit>,
    pub validation_failures: Vec<String>,
    pub failed_chunks: Vec<ChunkFailure>,
    pub provenance: Provenance,
}

/// Everything the pipeline reads from or writes to.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub store: &'a MemoryStore,
    pub embedder: &'a dyn EmbeddingProvider,
    pub completer: &'a dyn CompletionProvider,
    pub redactor: &'a Redactor,
    pub config: &'a EngineConfig,
}

/// Output of the extraction stages before anything is written.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionOutcome {
    pub mode: ContentMode,
    pub chunks: Vec<Chunk>,
    pub facts: Vec<ExtractedFact>,
    pub properties: Vec<ExtractedProperty>,
    pub validation_failures: Vec<String>,
    pub failed_chunks: Vec<ChunkFailure>,
    pub audits: Vec<RedactionAudit>,
}

impl ExtractionOutcome {
    pub fn redaction_applied(&self) -> bool {
        self.audits.iter().any(|a| a.count > 0)
    }
}

struct Candidate {
    entry: MemoryEntry,
    scope: DedupScope,
    replace: bool,
}

fn entry_id(parts: &[&str]) -> String {
    format!("mem-{}", &sha256_hex(parts.join("\u{1f}").as_bytes())[..24])
}

impl Pipeline<'_> {
    /// Redaction, chunking, property selection, dual extraction, post-redaction
    /// and cross-chunk dedup; nothing is written.
    pub fn extract(
        &self,
        content: &str,
        schema: Option<&Schema>,
        options: &MemorizeOptions,
    ) -> Result<ExtractionOutcome, ExtractionError> {
        if content.trim().is_empty() {
            return Err(ExtractionError::EmptyContent);
        }
        let redaction = options.redaction.clone().unwrap_or_default();
        let phase1 = self.redactor.redact(content, &redaction);
        let mode = options.mode.unwrap_or_else(|| infer_mode(&phase1.text));
        let chunks = chunk(&phase1.text, mode)?;

        let results: Vec<Result<ChunkExtraction, ProviderError>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|c| s.spawn(move || self.extract_chunk(c, schema)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(ProviderError::Failure("extraction worker panicked".into()))))
                .collect()
        });

        let mut facts = Vec::new();
        let mut props = Vec::new();
        let mut validation_failures = Vec::new();
        let mut failed_chunks = Vec::new();
        for (c, r) in chunks.iter().zip(results) {
            match r {
                Ok(x) => {
                    facts.extend(x.facts);
                    props.extend(x.properties);
                    validation_failures.extend(x.validation_failures);
                }
                Err(e) => {
                    tracing::warn!(chunk = c.index, error = %e, "chunk extraction failed");
                    failed_chunks.push(ChunkFailure {
                        chunk_index: c.index,
                        error: e.to_string(),
                    });
                }
            }
        }
        if failed_chunks.len() == chunks.len() {
            return Err(ExtractionError::PipelineFailed(format!(
                "all {} chunks failed: {}",
                chunks.len(),
                failed_chunks[0].error
            )));
        }

        let mut audits = phase1.audits;
        for f in &mut facts {
            let r = self.redactor.redact(&f.text, &redaction);
            f.text = r.text;
            audits = merge_audits(&audits, &r.audits);
        }
        for p in &mut props {
            match &mut p.value {
                TypedValue::Text(s) => {
                    let r = self.redactor.redact(s, &redaction);
                    *s = r.text;
                    audits = merge_audits(&audits, &r.audits);
                }
                TypedValue::Array(items) => {
                    for s in items.iter_mut() {
                        let r = self.redactor.redact(s, &redaction);
                        *s = r.text;
                        audits = merge_audits(&audits, &r.audits);
                    }
                }
                _ => {}
            }
        }
        let (facts, properties) = cross_chunk_dedup(facts, props);
        Ok(ExtractionOutcome {
            mode,
            chunks,
            facts,
            properties,
            validation_failures,
            failed_chunks,
            audits,
        })
    }

    fn extract_chunk(&self, c: &Chunk, schema: Option<&Schema>) -> Result<ChunkExtraction, ProviderError> {
        let selected: Vec<SchemaProperty> = match schema {
            Some(s) => select_properties(
                &c.text,
                s,
                self.embedder,
                self.config.property_select_min_score,
                self.config.property_select_max_count,
            )?
            .into_iter()
            .map(|(p, _)| p)
            .collect(),
            None => Vec::new(),
        };
        dual_extract(c, &selected, self.completer)
    }

    /// Runs every stage and writes the surviving candidates.
    pub fn memorize(&self, req: &MemorizeRequest) -> Result<PipelineReport, ExtractionError> {
        if req.org_id.trim().is_empty() {
            return Err(ExtractionError::MissingOrgId);
        }
        let org = req.org_id.as_str();
        let record_id = match &req.crm_keys {
            Some(keys) => Some(match resolve_entity(keys, self.store, org)? {
                Some(id) => id,
                None => keys.canonical_record_id()?,
            }),
            None => None,
        };
        let outcome = self.extract(&req.content, req.schema.as_ref(), &req.options)?;
        let gate_cfg = req.options.gates.clone().unwrap_or_default();
        let gate_report = quality_gates(
            &outcome.facts.iter().map(|f| f.text.as_str()).collect::<Vec<_>>(),
            &gate_cfg,
        );
        let now = self.store.now();
        let provenance = Provenance {
            content_hash: content_hash(&req.content),
            content_length: req.content.chars().count(),
            speaker: req.options.speaker.clone(),
            extraction_method: ExtractionMethod::DualExtract,
            llm_model: Some(self.completer.model_id()),
            chunk_index: None,
            chunk_total: Some(outcome.chunks.len()),
            redaction_applied: Some(outcome.redaction_applied()),
            timestamp: now,
        };
        let crm_attr = req.crm_keys.as_ref().map(|k| {
            let mut k = k.clone();
            k.record_id = record_id.clone();
            serde_json::to_value(k).expect("keys serialize")
        });
        let source = req.options.source.clone().unwrap_or_else(|| "memorize".to_string());
        let rid = record_id.as_deref().unwrap_or("");

        let base = |text: String, chunk_index: usize| {
            let mut e = MemoryEntry::fact(String::new(), org, text, now);
            e.record_id = record_id.clone();
            e.source = source.clone();
            if let Some(a) = &crm_attr {
                e.custom_attributes.insert(CRM_KEYS_ATTRIBUTE.to_string(), a.clone());
            }
            let mut p = provenance.clone();
            p.chunk_index = Some(chunk_index);
            e.provenance = Some(p);
            e
        };

        let mut dropped_by_gates = 0;
        let mut candidates = Vec::new();
        for (i, f) in outcome.facts.iter().enumerate() {
            if gate_cfg.drop_flagged && gate_report.flagged_fact_indices.contains(i) {
                dropped_by_gates += 1;
                continue;
            }
            let mut e = base(f.text.clone(), f.chunk_index);
            e.id = entry_id(&[org, rid, "memory", &f.text]);
            e.keywords = f.keywords.clone();
            e.persons = f.persons.clone();
            e.entities = f.entities.clone();
            e.location = f.location.clone();
            e.topic = f.topic.clone();
            e.timestamp = f.timestamp;
            candidates.push(Candidate {
                entry: e,
                scope: DedupScope {
                    record_id: record_id.clone(),
                    memory_type: Some(MemoryType::Memory),
                    property_id: None,
                },
                replace: false,
            });
        }
        let schema_props: BTreeMap<&str, &SchemaProperty> = req
            .schema
            .iter()
            .flat_map(|s| s.properties.iter().map(|p| (p.id.as_str(), p)))
            .collect();
        for p in &outcome.properties {
            let Some(def) = schema_props.get(p.property_id.as_str()) else { continue };
            let value = p.value.to_string();
            let mut e = base(format!("{}: {}", def.name, value), p.chunk_index);
            let replace = p.update_mode == UpdateMode::Replace;
            e.id = if replace {
                entry_id(&[org, rid, "property_value", &def.id])
            } else {
                entry_id(&[org, rid, "property_value", &def.id, &value])
            };
            e.entry_type = MemoryType::PropertyValue;
            e.property_id = Some(def.id.clone());
            e.property_name = Some(def.name.clone());
            e.system_name = Some(def.system_name.clone());
            e.property_value = Some(value);
            e.collection_id = def.collection_id.clone();
            e.confidence = Some(p.confidence);
            candidates.push(Candidate {
                entry: e,
                scope: DedupScope {
                    record_id: record_id.clone(),
                    memory_type: Some(MemoryType::PropertyValue),
                    property_id: Some(def.id.clone()),
                },
                replace,
            });
        }

        let texts: Vec<String> = candidates.iter().map(|c| c.entry.text.clone()).collect();
        let vectors = if texts.is_empty() {
            Vec::new()
        } else {
            self.embedder.embed(&texts)?
        };
        if vectors.len() != candidates.len() {
            return Err(ProviderError::Malformed("embedding batch size mismatch".into()).into());
        }

        let threshold = self.config.write_dedup_threshold;
        let total_candidates = candidates.len();
        let written = self.store.exclusive(org, |part| -> Result<_, StoreError> {
            let mut stored_ids = Vec::new();
            let mut skipped = Vec::new();
            let (mut facts, mut props) = (0, 0);
            for (c, v) in candidates.into_iter().zip(vectors) {
                if c.replace {
                    if let Some(existing) = part.get(&c.entry.id) {
                        if existing.entry.property_value == c.entry.property_value {
                            skipped.push(SkippedDuplicate {
                                text: c.entry.text,
                                duplicate_of: existing.entry.id.clone(),
                            });
                            continue;
                        }
                    }
                } else if let Some((dup, _)) = part.nearest_above(&v, threshold, &c.scope) {
                    skipped.push(SkippedDuplicate {
                        text: c.entry.text,
                        duplicate_of: dup,
                    });
                    continue;
                }
                match c.entry.entry_type {
                    MemoryType::Memory => facts += 1,
                    MemoryType::PropertyValue => props += 1,
                }
                stored_ids.push(part.put(c.entry, v)?);
            }
            part.sync()?;
            Ok((stored_ids, skipped, facts, props))
        })??;
        let (stored_ids, skipped, stored_facts, stored_props) = written;

        Ok(PipelineReport {
            org_id: org.to_string(),
            record_id,
            mode: outcome.mode,
            chunks: outcome.chunks.len(),
            candidates: total_candidates,
            stored_facts,
            stored_props,
            skipped_duplicates: skipped.len(),
            stored_ids,
            skipped,
            dropped_by_gates,
            gate_report,
            audits: outcome.audits,
            validation_failures: outcome.validation_failures,
            failed_chunks: outcome.failed_chunks,
            provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{reference_epoch, ManualClock};
    use crate::providers::{HashEmbedder, ScriptedCompleter};
    use crate::schema::PropertyType;
    use std::sync::Arc;

    fn chunk0(text: &str) -> Chunk {
        chunk(text, ContentMode::Document).unwrap().remove(0)
    }

    #[test]
    fn type_gate_drops_bad_values() {
        let props = vec![
            SchemaProperty::new("deal_value", "Deal value", PropertyType::Number, "contract value"),
            SchemaProperty::new("stage", "Stage", PropertyType::Options, "pipeline stage").with_options(&["open", "won"]),
        ];
        let c = ScriptedCompleter::builder()
            .always(
                PromptKind::DualExtract,
                json!({"facts": ["Acme Corp renewed.", {"text": "Acme Corp has 40 seats."}, {"text": "  "}],
                       "properties": [
                           {"propertyId": "deal_value", "value": "not a number", "confidence": 0.9},
                           {"propertyId": "stage", "value": "lost", "confidence": 0.9},
                           {"propertyId": "prop-stage", "value": "won", "confidence": 0.8}
                       ]}),
            )
            .build();
        let out = dual_extract(&chunk0("Acme call notes"), &props, &c).unwrap();
        assert_eq!(out.facts.len(), 2);
        assert_eq!(out.properties.len(), 1);
        assert_eq!(out.properties[0].value, TypedValue::Option("won".into()));
        assert_eq!(out.validation_failures.len(), 3);
    }

    #[test]
    fn dedup_rules() {
        let f = |t: &str, i| ExtractedFact {
            text: t.into(),
            keywords: vec![],
            persons: vec![],
            entities: vec![],
            location: None,
            topic: None,
            timestamp: None,
            chunk_index: i,
        };
        let p = |id: &str, v: &str, c, m, i| ExtractedProperty {
            property_id: id.into(),
            value: TypedValue::Text(v.into()),
            confidence: c,
            update_mode: m,
            chunk_index: i,
        };
        let (facts, props) = cross_chunk_dedup(
            vec![f("Acme renewed.", 0), f("acme   renewed", 1)],
            vec![
                p("x", "a", 0.7, UpdateMode::Replace, 0),
                p("x", "b", 0.9, UpdateMode::Replace, 1),
                p("t", "Go", 0.5, UpdateMode::Accumulate, 0),
                p("t", "Rust", 0.5, UpdateMode::Accumulate, 1),
            ],
        );
        assert_eq!(facts.len(), 1);
        assert_eq!(props.len(), 3);
        assert_eq!(props[0].value, TypedValue::Text("b".into()));
    }

    #[test]
    fn property_selection_prefers_matching_keywords() {
        let schema = Schema::new(
            "s",
            "S",
            vec![
                SchemaProperty::new("budget", "Budget", PropertyType::Number, "annual budget dollars"),
                SchemaProperty::new("hq", "Headquarters", PropertyType::Text, "office city location"),
            ],
        );
        let e = HashEmbedder::new(256);
        let sel = select_properties("Budget: annual budget dollars", &schema, &e, 0.0, 25).unwrap();
        assert_eq!(sel[0].0.system_name, "budget");
        assert!(sel[0].1 > sel[1].1);
        let capped = select_properties("Budget: annual budget dollars", &schema, &e, 0.0, 1).unwrap();
        assert_eq!(capped.len(), 1);
    }

    #[test]
    fn memorize_twice_skips_everything() {
        let clock = Arc::new(ManualClock::new(reference_epoch()));
        let store = MemoryStore::with_clock(256, clock);
        let emb = HashEmbedder::new(256);
        let comp = ScriptedCompleter::builder()
            .always(
                PromptKind::DualExtract,
                json!({"facts": ["Acme Corp signed a three year renewal.", "Dana Lee leads procurement at Acme Corp."]}),
            )
            .build();
        let redactor = Redactor::builtin();
        let cfg = EngineConfig::default();
        let p = Pipeline {
            store: &store,
            embedder: &emb,
            completer: &comp,
            redactor: &redactor,
            config: &cfg,
        };
        let req = MemorizeRequest::new("org", "call notes with Acme").for_entity(CrmKeys::record("c-1"));
        let first = p.memorize(&req).unwrap();
        assert_eq!(first.stored_facts, 2);
        let second = p.memorize(&req).unwrap();
        assert_eq!(second.skipped_duplicates, first.stored_facts + first.stored_props);
        assert_eq!(second.stored_ids.len(), 0);
        let e = store.get("org", &first.stored_ids[0]).unwrap();
        assert_eq!(e.provenance.unwrap().content_hash, content_hash("call notes with Acme"));
    }

    #[test]
    fn card_number_never_stored() {
        let store = MemoryStore::in_memory(64);
        let emb = HashEmbedder::new(64);
        let comp = ScriptedCompleter::builder()
            .always(PromptKind::DualExtract, json!({"facts": ["Card on file is 4111 1111 1111 1111."]}))
            .build();
        let redactor = Redactor::builtin();
        let cfg = EngineConfig::default();
        let p = Pipeline {
            store: &store,
            embedder: &emb,
            completer: &comp,
            redactor: &redactor,
            config: &cfg,
        };
        let r = p.memorize(&MemorizeRequest::new("o", "4111 1111 1111 1111")).unwrap();
        assert!(r.provenance.redaction_applied.unwrap());
        for e in store.list("o") {
            assert!(!e.text.contains("4111"), "{}", e.text);
        }
    }

    #[test]
    fn all_chunks_failing_writes_nothing() {
        let store = MemoryStore::in_memory(64);
        let emb = HashEmbedder::new(64);
        let comp = ScriptedCompleter::builder()
            .fail(PromptKind::DualExtract, crate::providers::Matcher::Any, "down")
            .build();
        let redactor = Redactor::builtin();
        let cfg = EngineConfig::default();
        let p = Pipeline {
            store: &store,
            embedder: &emb,
            completer: &comp,
            redactor: &redactor,
            config: &cfg,
        };
        assert!(matches!(
            p.memorize(&MemorizeRequest::new("o", "text")),
            Err(ExtractionError::PipelineFailed(_))
        ));
        assert!(store.is_empty("o"));
    }
}
