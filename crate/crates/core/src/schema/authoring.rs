use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{PropertyType, Schema, SchemaError, SchemaProperty};
use crate::model::sha256_hex;
use crate::providers::{CompletionProvider, CompletionRequest, PromptKind};

const AUTHOR_TEMPERATURE: f64 = 0.0;
const ENHANCE_TEMPERATURE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuthoredSchema {
    pub schema: Schema,
    /// One line per proposed property that failed validation.
    pub dropped: Vec<String>,
}

fn snake_case(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') && !out.is_empty() {
            out.push('_');
        }
    }
    out.trim_end_matches('_').to_string()
}

fn str_field(v: &Value, key: &str) -> Option<String> {
    v.get(key).and_then(Value::as_str).map(str::trim).filter(|s| !s.is_empty()).map(str::to_string)
}

fn parse_type(v: &Value) -> Result<PropertyType, String> {
    let raw = v.get("type").and_then(Value::as_str).unwrap_or("text");
    serde_json::from_value(Value::from(raw.to_ascii_lowercase())).map_err(|_| format!("unknown type `{raw}`"))
}

fn parse_options(v: &Value) -> Option<Vec<String>> {
    v.get("options").and_then(Value::as_array).map(|a| {
        a.iter()
            .filter_map(Value::as_str)
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    })
}

fn property_from_json(v: &Value) -> Result<SchemaProperty, String> {
    let name = str_field(v, "name").ok_or("missing name")?;
    let system_name = str_field(v, "systemName").map_or_else(|| snake_case(&name), |s| snake_case(&s));
    if system_name.is_empty() {
        return Err(format!("{name}: no usable systemName"));
    }
    let mut p = SchemaProperty::new(&system_name, &name, parse_type(v)?, &str_field(v, "description").unwrap_or_default());
    p.extraction_hints = str_field(v, "extractionHints");
    p.options = parse_options(v).filter(|o| !o.is_empty());
    p.validate().map_err(|e| e.to_string())?;
    Ok(p)
}

/// Turns a natural-language intent into a validated schema. Proposed
/// properties that break the property invariants are dropped and reported.
pub fn author_schema(intent: &str, completer: &dyn CompletionProvider) -> Result<AuthoredSchema, SchemaError> {
    let intent = intent.trim();
    if intent.is_empty() {
        return Err(SchemaError::InvalidInput("intent is empty".into()));
    }
    let resp = completer.complete(&CompletionRequest::new(
        PromptKind::SchemaAuthor,
        json!({"intent": intent}),
        AUTHOR_TEMPERATURE,
    ))?;
    let mut properties = Vec::new();
    let mut dropped = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in resp["properties"].as_array().into_iter().flatten().enumerate() {
        match property_from_json(raw) {
            Ok(p) if !seen.insert(p.system_name.clone()) => dropped.push(format!("#{i} {}: duplicate systemName", p.system_name)),
            Ok(p) => properties.push(p),
            Err(why) => dropped.push(format!("#{i} {why}")),
        }
    }
    for d in &dropped {
        tracing::warn!("authored property dropped: {d}");
    }
    if properties.is_empty() {
        return Err(SchemaError::EmptySchema);
    }
    let name = str_field(&resp, "name").unwrap_or_else(|| intent.chars().take(60).collect());
    let mut schema = Schema::new(&format!("schema-{}", &sha256_hex(intent.as_bytes())[..12]), &name, properties);
    schema.description = str_field(&resp, "description").unwrap_or_else(|| intent.to_string());
    schema.validate()?;
    Ok(AuthoredSchema { schema, dropped })
}

/// Applies a provider revision to `p`. Identity and type are fixed; any
/// other field present in `revision` replaces the current one.
pub(crate) fn apply_revision(p: &SchemaProperty, revision: &Value) -> Result<SchemaProperty, SchemaError> {
    let revision = revision.get("property").unwrap_or(revision);
    if let Some(raw) = revision.get("type").and_then(Value::as_str) {
        let t = parse_type(revision).map_err(SchemaError::InvalidProperty)?;
        if t != p.prop_type {
            return Err(SchemaError::TypeChangeRejected {
                property: p.system_name.clone(),
                from: p.prop_type.as_str().into(),
                to: raw.into(),
            });
        }
    }
    let mut out = p.clone();
    if let Some(n) = str_field(revision, "name") {
        out.name = n;
    }
    if let Some(d) = str_field(revision, "description") {
        out.description = d;
    }
    if let Some(h) = str_field(revision, "extractionHints") {
        out.extraction_hints = Some(h);
    }
    if let Some(o) = parse_options(revision) {
        out.options = Some(o);
    }
    out.version = p.version + 1;
    out.validate()?;
    Ok(out)
}

/// Revises one property from operator feedback.
pub fn enhance_property(
    p: &SchemaProperty,
    feedback: &str,
    completer: &dyn CompletionProvider,
) -> Result<SchemaProperty, SchemaError> {
    if feedback.trim().is_empty() {
        return Err(SchemaError::InvalidInput("feedback is empty".into()));
    }
    let resp = completer.complete(&CompletionRequest::new(
        PromptKind::SchemaEnhance,
        json!({"property": p, "feedback": feedback}),
        ENHANCE_TEMPERATURE,
    ))?;
    apply_revision(p, &resp)
}
