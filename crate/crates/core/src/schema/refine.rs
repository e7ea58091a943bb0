use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::authoring::apply_revision;
use super::{Schema, SchemaError, SchemaProperty};
use crate::extraction::{MemorizeOptions, Pipeline};
use crate::providers::{CompletionProvider, CompletionRequest, PromptKind};

const ANALYSIS_TEMPERATURE: f64 = 0.1;
const OPTIMIZE_TEMPERATURE: f64 = 0.2;
const SAMPLE_EXCERPT_CHARS: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Extracted,
    Missed,
    LowConfidence,
    Inaccurate,
    Unavailable,
}

impl Classification {
    /// Whether the property definition itself should be rewritten.
    pub fn needs_revision(self) -> bool {
        matches!(self, Classification::Missed | Classification::LowConfidence | Classification::Inaccurate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PropertyDiagnosis {
    pub property_id: String,
    pub classification: Classification,
    pub instructions: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RevisedProperty {
    pub property: SchemaProperty,
    pub change_annotation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RefinementReport {
    /// Phase-1 values by property id: `{value, confidence}` or null.
    pub baseline: BTreeMap<String, Value>,
    pub diagnoses: Vec<PropertyDiagnosis>,
    pub revised_properties: Vec<RevisedProperty>,
    /// Properties whose optimization failed; they stay unrevised.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

fn baseline(schema: &Schema, sample: &str, pipeline: &Pipeline<'_>) -> Result<BTreeMap<String, Value>, SchemaError> {
    let outcome = pipeline
        .extract(sample, Some(schema), &MemorizeOptions::default())
        .map_err(|e| SchemaError::Extraction(e.to_string()))?;
    let mut out: BTreeMap<String, Value> = schema.properties.iter().map(|p| (p.id.clone(), Value::Null)).collect();
    for x in outcome.properties {
        let better = match &out.get(&x.property_id) {
            Some(Value::Object(cur)) => cur["confidence"].as_f64().unwrap_or(0.0) < x.confidence,
            _ => true,
        };
        if better {
            out.insert(
                x.property_id.clone(),
                json!({"value": x.value.to_string(), "confidence": x.confidence}),
            );
        }
    }
    Ok(out)
}

fn expected_for(schema: &Schema, expected: &BTreeMap<String, Value>) -> Map<String, Value> {
    let mut out = Map::new();
    for (k, v) in expected {
        if let Some(p) = schema.property(k) {
            out.insert(p.id.clone(), v.clone());
        }
    }
    out
}

fn parse_diagnoses(schema: &Schema, resp: &Value, base: &BTreeMap<String, Value>) -> Vec<PropertyDiagnosis> {
    let mut given: BTreeMap<String, PropertyDiagnosis> = BTreeMap::new();
    for d in resp["diagnoses"].as_array().into_iter().flatten() {
        let Some(p) = d["propertyId"].as_str().and_then(|id| schema.property(id)) else { continue };
        let Ok(classification) = serde_json::from_value::<Classification>(d["classification"].clone()) else { continue };
        given.entry(p.id.clone()).or_insert(PropertyDiagnosis {
            property_id: p.id.clone(),
            classification,
            instructions: d["instructions"].as_str().unwrap_or_default().trim().to_string(),
        });
    }
    schema
        .properties
        .iter()
        .map(|p| {
            let mut d = given.remove(&p.id).unwrap_or_else(|| PropertyDiagnosis {
                property_id: p.id.clone(),
                classification: if base.get(&p.id).is_some_and(|v| !v.is_null()) {
                    Classification::Extracted
                } else {
                    Classification::Unavailable
                },
                instructions: String::new(),
            });
            if d.classification == Classification::Extracted {
                d.instructions.clear();
            }
            d
        })
        .collect()
}

fn optimize_one(
    p: &SchemaProperty,
    d: &PropertyDiagnosis,
    excerpt: &str,
    completer: &dyn CompletionProvider,
) -> Result<RevisedProperty, SchemaError> {
    let resp = completer.complete(&CompletionRequest::new(
        PromptKind::PropertyOptimize,
        json!({
            "property": p,
            "classification": d.classification,
            "instructions": d.instructions,
            "sample": excerpt,
        }),
        OPTIMIZE_TEMPERATURE,
    ))?;
    let property = apply_revision(p, &resp)?;
    let change_annotation = resp["changeAnnotation"]
        .as_str()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .unwrap_or_else(|| {
            let cls = serde_json::to_value(d.classification).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            format!("{} revised after `{cls}` diagnosis: {}", p.name, d.instructions)
        });
    Ok(RevisedProperty {
        property,
        change_annotation,
    })
}

/// Extraction replay, one schema-wide diagnosis call, then one optimization
/// call per missed, low-confidence or inaccurate property, run concurrently.
/// Extracted and unavailable properties are never revised.
pub fn refine_schema(
    schema: &Schema,
    sample: &str,
    expected: Option<&BTreeMap<String, Value>>,
    pipeline: &Pipeline<'_>,
    completer: &dyn CompletionProvider,
) -> Result<RefinementReport, SchemaError> {
    schema.validate()?;
    let base = baseline(schema, sample, pipeline)?;
    let excerpt: String = sample.chars().take(SAMPLE_EXCERPT_CHARS).collect();
    let mut payload = json!({
        "properties": schema.properties,
        "sample": excerpt,
        "baseline": base,
    });
    if let Some(exp) = expected {
        payload["expected"] = Value::Object(expected_for(schema, exp));
    }
    let resp = completer.complete(&CompletionRequest::new(PromptKind::PropertyAnalysis, payload, ANALYSIS_TEMPERATURE))?;
    let diagnoses = parse_diagnoses(schema, &resp, &base);

    let targets: Vec<(&SchemaProperty, &PropertyDiagnosis)> = schema
        .properties
        .iter()
        .zip(&diagnoses)
        .filter(|(_, d)| d.classification.needs_revision())
        .collect();
    let results: Vec<Result<RevisedProperty, SchemaError>> = std::thread::scope(|s| {
        let handles: Vec<_> = targets
            .iter()
            .map(|(p, d)| {
                let excerpt = excerpt.as_str();
                s.spawn(move || optimize_one(p, d, excerpt, completer))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(SchemaError::InvalidInput("optimizer panicked".into()))))
            .collect()
    });
    let mut report = RefinementReport {
        baseline: base,
        diagnoses: Vec::new(),
        revised_properties: Vec::new(),
        failures: Vec::new(),
    };
    for ((p, _), r) in targets.iter().zip(results) {
        match r {
            Ok(rev) => report.revised_properties.push(rev),
            Err(e) => {
                tracing::warn!(property = %p.id, error = %e, "property optimization failed");
                report.failures.push(format!("{}: {e}", p.id));
            }
        }
    }
    report.diagnoses = diagnoses;
    Ok(report)
}
