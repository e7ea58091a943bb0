//! Shared data model: memory records, CRM identity keys, engine configuration,
//! content hashing and token estimation.
//!
//! The JSON form of [`MemoryEntry`] is the canonical wire record used by the
//! store log, the HTTP surface and the Python bindings: camelCase field names,
//! absent optionals omitted rather than written as `null`.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::store::MemoryStore;

/// Number of leading characters covered by [`content_hash`].
pub const CONTENT_HASH_PREFIX_CHARS: usize = 1000;

/// Custom attribute key under which an entry's CRM identity keys are kept.
pub const CRM_KEYS_ATTRIBUTE: &str = "crmKeys";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("all CRM key fields are empty")]
    EmptyKeys,
    #[error("invalid memory entry: {0}")]
    InvalidEntry(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryType {
    Memory,
    PropertyValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    SingleExtract,
    DualExtract,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Provenance {
    pub content_hash: String,
    pub content_length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    pub extraction_method: ExtractionMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_total: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub redaction_applied: Option<bool>,
    pub timestamp: DateTime<Utc>,
}

/// The unified record for open-set facts and typed property values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MemoryEntry {
    pub id: String,
    pub text: String,
    pub org_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    #[serde(rename = "type")]
    pub entry_type: MemoryType,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub persons: Vec<String>,
    #[serde(default)]
    pub entities: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<DateTime<Utc>>,
    #[serde(default)]
    pub custom_attributes: BTreeMap<String, Value>,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub property_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub property_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub property_value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collection_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl MemoryEntry {
    /// A bare open-set memory with empty metadata.
    pub fn fact(
        id: impl Into<String>,
        org_id: impl Into<String>,
        text: impl Into<String>,
        now: DateTime<Utc>,
    ) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            org_id: org_id.into(),
            record_id: None,
            entry_type: MemoryType::Memory,
            keywords: Vec::new(),
            persons: Vec::new(),
            entities: Vec::new(),
            location: None,
            topic: None,
            timestamp: None,
            custom_attributes: BTreeMap::new(),
            source: "api".to_string(),
            score: None,
            created_at: now,
            updated_at: now,
            property_id: None,
            property_name: None,
            system_name: None,
            property_value: None,
            collection_id: None,
            confidence: None,
            provenance: None,
        }
    }

    pub fn with_record(mut self, record_id: impl Into<String>) -> Self {
        self.record_id = Some(record_id.into());
        self
    }

    pub fn is_memory(&self) -> bool {
        self.entry_type == MemoryType::Memory
    }

    /// The instant used for recency: the temporal anchor when present, else creation time.
    pub fn effective_time(&self) -> DateTime<Utc> {
        self.timestamp.unwrap_or(self.created_at)
    }

    pub fn crm_keys(&self) -> Option<CrmKeys> {
        self.custom_attributes
            .get(CRM_KEYS_ATTRIBUTE)
            .and_then(|v| serde_json::from_value(v.clone()).ok())
    }

    /// Checks the type-discriminated field invariants.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidEntry(format!("{}: {m}", self.id)));
        if self.id.is_empty() {
            return Err(ModelError::InvalidEntry("empty id".into()));
        }
        if self.org_id.is_empty() {
            return bad("empty orgId");
        }
        let prop_fields = [
            self.property_id.is_some(),
            self.property_name.is_some(),
            self.property_value.is_some(),
            self.confidence.is_some(),
        ];
        match self.entry_type {
            MemoryType::PropertyValue => {
                if prop_fields.iter().any(|present| !present) {
                    return bad("property_value entry missing property fields");
                }
            }
            MemoryType::Memory => {
                if prop_fields.iter().any(|present| *present) || self.system_name.is_some() {
                    return bad("memory entry carries property fields");
                }
            }
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return bad("confidence outside [0,1]");
            }
        }
        if let Some(p) = &self.provenance {
            if let (Some(i), Some(n)) = (p.chunk_index, p.chunk_total) {
                if i >= n {
                    return bad("chunkIndex outside [0, chunkTotal)");
                }
            }
        }
        Ok(())
    }
}

/// Identity keys used to resolve an entity within an organization.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CrmKeys {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub email: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub website_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phone_number: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom_identifiers: Option<BTreeMap<String, String>>,
}

impl CrmKeys {
    pub fn record(id: impl Into<String>) -> Self {
        Self {
            record_id: Some(id.into()),
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.record_id.is_none()
            && self.email.is_none()
            && self.website_url.is_none()
            && self.phone_number.is_none()
            && self.custom_identifiers.as_ref().is_none_or(|m| m.is_empty())
    }

    /// Record id to assign when these keys do not resolve to a known entity.
    ///
    /// An explicit record id wins; otherwise the id is derived from the
    /// strongest normalized key so later lookups with the same key agree.
    pub fn canonical_record_id(&self) -> Result<String, ModelError> {
        if let Some(id) = &self.record_id {
            return Ok(id.clone());
        }
        let basis = if let Some(e) = &self.email {
            format!("email:{}", normalize_email(e))
        } else if let Some(w) = &self.website_url {
            format!("web:{}", normalize_website(w))
        } else if let Some(p) = &self.phone_number {
            format!("phone:{}", normalize_phone(p))
        } else if let Some((k, v)) = self.custom_identifiers.as_ref().and_then(|m| m.iter().next()) {
            format!("custom:{k}={v}")
        } else {
            return Err(ModelError::EmptyKeys);
        };
        Ok(format!("ent-{}", &sha256_hex(basis.as_bytes())[..16]))
    }
}

pub fn normalize_email(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Host part of a URL: scheme, `www.`, path and trailing slash dropped.
pub fn normalize_website(s: &str) -> String {
    let s = s.trim().to_lowercase();
    let s = s
        .strip_prefix("https://")
        .or_else(|| s.strip_prefix("http://"))
        .unwrap_or(&s);
    let host = s.split(['/', '?', '#']).next().unwrap_or("");
    host.strip_prefix("www.").unwrap_or(host).to_string()
}

pub fn normalize_phone(s: &str) -> String {
    s.chars().filter(|c| c.is_ascii_digit()).collect()
}

/// Resolves CRM keys to a canonical record id using the identities known to
/// the store. Priority: recordId, email, website, phone, custom identifiers;
/// the first hit wins.
pub fn resolve_entity(
    keys: &CrmKeys,
    store: &MemoryStore,
    org_id: &str,
) -> Result<Option<String>, ModelError> {
    if keys.is_empty() {
        return Err(ModelError::EmptyKeys);
    }
    Ok(resolve_in_directory(keys, &store.entity_directory(org_id)))
}

/// Resolution against an explicit `(recordId, keys)` directory sorted by record id.
pub fn resolve_in_directory(keys: &CrmKeys, directory: &[(String, CrmKeys)]) -> Option<String> {
    if let Some(id) = &keys.record_id {
        if directory.iter().any(|(rid, _)| rid == id) {
            return Some(id.clone());
        }
    }
    let first = |pred: &dyn Fn(&CrmKeys) -> bool| {
        directory
            .iter()
            .find(|(_, k)| pred(k))
            .map(|(rid, _)| rid.clone())
    };
    if let Some(email) = &keys.email {
        let want = normalize_email(email);
        if let Some(hit) = first(&|k| k.email.as_deref().map(normalize_email) == Some(want.clone())) {
            return Some(hit);
        }
    }
    if let Some(url) = &keys.website_url {
        let want = normalize_website(url);
        if let Some(hit) =
            first(&|k| k.website_url.as_deref().map(normalize_website) == Some(want.clone()))
        {
            return Some(hit);
        }
    }
    if let Some(phone) = &keys.phone_number {
        let want = normalize_phone(phone);
        if !want.is_empty() {
            if let Some(hit) =
                first(&|k| k.phone_number.as_deref().map(normalize_phone) == Some(want.clone()))
            {
                return Some(hit);
            }
        }
    }
    if let Some(custom) = &keys.custom_identifiers {
        for (name, value) in custom {
            let hits: Vec<&String> = directory
                .iter()
                .filter(|(_, k)| {
                    k.custom_identifiers
                        .as_ref()
                        .and_then(|m| m.get(name))
                        .is_some_and(|v| v == value)
                })
                .map(|(rid, _)| rid)
                .collect();
            if hits.len() > 1 {
                tracing::warn!(identifier = %name, matches = hits.len(), "custom identifier matches several entities");
            }
            if let Some(hit) = hits.first() {
                return Some((*hit).clone());
            }
        }
    }
    None
}

/// Engine-wide tunables. Field names match the configuration file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct EngineConfig {
    pub write_dedup_threshold: f64,
    pub consolidation_merge_threshold: f64,
    pub consolidation_min_org_memories: usize,
    pub retention_days: i64,
    pub reflection_max_rounds: usize,
    pub completeness_temperature: f64,
    pub followup_temperature: f64,
    pub recency_half_life_days: f64,
    pub session_ttl_hours: i64,
    pub property_select_min_score: f64,
    pub property_select_max_count: usize,
    pub fast_route_embedding_weight: f64,
    pub fast_route_keyword_weight: f64,
    pub fast_route_trigger_boost: f64,
    pub fast_route_critical_cutoff: f64,
    pub token_chars_per_token: usize,
    pub embedding_dim: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            write_dedup_threshold: 0.92,
            consolidation_merge_threshold: 0.95,
            consolidation_min_org_memories: 10,
            retention_days: 365,
            reflection_max_rounds: 2,
            completeness_temperature: 0.1,
            followup_temperature: 0.3,
            recency_half_life_days: 38.0,
            session_ttl_hours: 24,
            property_select_min_score: 0.35,
            property_select_max_count: 25,
            fast_route_embedding_weight: 0.65,
            fast_route_keyword_weight: 0.35,
            fast_route_trigger_boost: 0.15,
            fast_route_critical_cutoff: 0.55,
            token_chars_per_token: 4,
            embedding_dim: 256,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let unit = [
            ("writeDedupThreshold", self.write_dedup_threshold),
            ("consolidationMergeThreshold", self.consolidation_merge_threshold),
            ("propertySelectMinScore", self.property_select_min_score),
            ("fastRouteCriticalCutoff", self.fast_route_critical_cutoff),
        ];
        for (name, v) in unit {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ModelError::InvalidConfig(format!("{name} must be in (0,1], got {v}")));
            }
        }
        if self.consolidation_merge_threshold <= self.write_dedup_threshold {
            return Err(ModelError::InvalidConfig(format!(
                "consolidationMergeThreshold ({}) must exceed writeDedupThreshold ({})",
                self.consolidation_merge_threshold, self.write_dedup_threshold
            )));
        }
        if self.token_chars_per_token == 0 {
            return Err(ModelError::InvalidConfig("tokenCharsPerToken must be positive".into()));
        }
        if self.embedding_dim == 0 {
            return Err(ModelError::InvalidConfig("embeddingDim must be positive".into()));
        }
        if self.recency_half_life_days <= 0.0 {
            return Err(ModelError::InvalidConfig("recencyHalfLifeDays must be positive".into()));
        }
        if self.retention_days < 0 || self.session_ttl_hours <= 0 {
            return Err(ModelError::InvalidConfig("retention and session TTL must be positive".into()));
        }
        for (name, w) in [
            ("fastRouteEmbeddingWeight", self.fast_route_embedding_weight),
            ("fastRouteKeywordWeight", self.fast_route_keyword_weight),
            ("fastRouteTriggerBoost", self.fast_route_trigger_boost),
        ] {
            if w < 0.0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Lowercase hex SHA-256 of the first 1000 characters of `text`.
pub fn content_hash(text: &str) -> String {
    let end = text
        .char_indices()
        .nth(CONTENT_HASH_PREFIX_CHARS)
        .map_or(text.len(), |(i, _)| i);
    sha256_hex(text[..end].as_bytes())
}

/// Character-count token estimate: `ceil(chars / chars_per_token)`.
pub fn estimate_tokens(text: &str, chars_per_token: usize) -> usize {
    text.chars().count().div_ceil(chars_per_token.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::reference_epoch;

    #[test]
    fn empty_hash_is_standard_digest() {
        assert_eq!(
            content_hash(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn hash_truncates_at_thousand_chars() {
        let s: String = "é".repeat(1000);
        assert_eq!(content_hash(&s), content_hash(&format!("{s}tail")));
        assert_ne!(content_hash(&s[..s.len() - 2]), content_hash(&s));
    }

    #[test]
    fn token_estimates() {
        assert_eq!(estimate_tokens("", 4), 0);
        assert_eq!(estimate_tokens("abcd", 4), 1);
        assert_eq!(estimate_tokens("abcdefghi", 4), 3);
    }

    #[test]
    fn entry_type_invariants() {
        let now = reference_epoch();
        let mut e = MemoryEntry::fact("m1", "org", "Acme renewed.", now);
        assert!(e.validate().is_ok());
        e.confidence = Some(0.5);
        assert!(e.validate().is_err());

        let mut p = MemoryEntry::fact("p1", "org", "Deal Value: 450000", now);
        p.entry_type = MemoryType::PropertyValue;
        assert!(p.validate().is_err());
        p.property_id = Some("deal_value".into());
        p.property_name = Some("Deal Value".into());
        p.property_value = Some("450000".into());
        p.confidence = Some(1.2);
        assert!(p.validate().is_err());
        p.confidence = Some(0.9);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn wire_form_omits_absent_optionals() {
        let e = MemoryEntry::fact("m1", "org", "x", reference_epoch());
        let json = serde_json::to_string(&e).unwrap();
        assert!(json.contains("\"type\":\"memory\""));
        assert!(json.contains("\"orgId\":\"org\""));
        assert!(!json.contains("null"));
        assert!(!json.contains("recordId"));
        let back: MemoryEntry = serde_json::from_str(&json).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn config_threshold_ordering() {
        let mut c = EngineConfig::default();
        assert!(c.validate().is_ok());
        c.consolidation_merge_threshold = 0.92;
        assert!(c.validate().is_err());
        c.consolidation_merge_threshold = 0.90;
        assert!(c.validate().is_err());
    }

    #[test]
    fn directory_resolution_priority() {
        let dir = vec![
            (
                "c-17".to_string(),
                CrmKeys {
                    record_id: Some("c-17".into()),
                    email: Some("a@x.com".into()),
                    ..Default::default()
                },
            ),
            (
                "c-18".to_string(),
                CrmKeys {
                    record_id: Some("c-18".into()),
                    phone_number: Some("15550102000".into()),
                    website_url: Some("https://www.acme.io/".into()),
                    ..Default::default()
                },
            ),
        ];
        assert_eq!(resolve_in_directory(&CrmKeys::record("c-17"), &dir).as_deref(), Some("c-17"));
        let by_email = CrmKeys {
            email: Some("A@X.COM".into()),
            ..Default::default()
        };
        assert_eq!(resolve_in_directory(&by_email, &dir).as_deref(), Some("c-17"));
        let by_phone = CrmKeys {
            phone_number: Some("+1 (555) 010-2000".into()),
            ..Default::default()
        };
        assert_eq!(resolve_in_directory(&by_phone, &dir).as_deref(), Some("c-18"));
        let by_site = CrmKeys {
            website_url: Some("http://acme.io".into()),
            ..Default::default()
        };
        assert_eq!(resolve_in_directory(&by_site, &dir).as_deref(), Some("c-18"));
        // email outranks a conflicting phone
        let both = CrmKeys {
            email: Some("a@x.com".into()),
            phone_number: Some("15550102000".into()),
            ..Default::default()
        };
        assert_eq!(resolve_in_directory(&both, &dir).as_deref(), Some("c-17"));
        assert_eq!(resolve_in_directory(&CrmKeys::record("zzz"), &dir), None);
    }

    #[test]
    fn canonical_ids_are_stable() {
        let a = CrmKeys {
            email: Some("A@X.com ".into()),
            ..Default::default()
        };
        let b = CrmKeys {
            email: Some("a@x.com".into()),
            ..Default::default()
        };
        assert_eq!(a.canonical_record_id().unwrap(), b.canonical_record_id().unwrap());
        assert_eq!(CrmKeys::default().canonical_record_id(), Err(ModelError::EmptyKeys));
    }
}
