//! Schema definitions, authoring and refinement, rubric evaluation and
//! diagnostics.

mod authoring;
mod diagnostics;
mod refine;
mod rubric;
mod types;

pub use authoring::{author_schema, enhance_property, AuthoredSchema};
pub use diagnostics::{aggregate_diagnostics, CriterionStat, DiagnosticPattern, DiagnosticThresholds, DiagnosticsReport, TrendSegment};
pub use refine::{refine_schema, Classification, PropertyDiagnosis, RefinementReport, RevisedProperty};
pub use rubric::{
    evaluate_interaction, Criterion, EvaluationInput, EvaluationLog, EvaluationRecord, ExecutionTrace, GovernanceRating,
    RecallLogEntry, Rubric,
};
pub use types::{parse_lenient_number, PropertyType, Schema, SchemaProperty, TypedValue};

use std::collections::BTreeMap;

use parking_lot::RwLock;

use crate::providers::ProviderError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchemaError {
    #[error("invalid property: {0}")]
    InvalidProperty(String),
    #[error("schema has no valid properties")]
    EmptySchema,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("type change {from} -> {to} rejected for {property}; migrate explicitly")]
    TypeChangeRejected { property: String, from: String, to: String },
    #[error("unknown schema {0}")]
    UnknownSchema(String),
    #[error("version conflict on {id}: expected {expected}, found {found}")]
    VersionConflict { id: String, expected: u32, found: u32 },
    #[error("invalid rubric: {0}")]
    InvalidRubric(String),
    #[error("recall log references unknown entry {0}")]
    UnknownRecallEntry(String),
    #[error("evaluation log: {0}")]
    Log(String),
    #[error("extraction replay failed: {0}")]
    Extraction(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Versioned schemas keyed by `(orgId, schemaId)` with compare-and-set writes.
#[derive(Debug, Default)]
pub struct SchemaRegistry {
    schemas: RwLock<BTreeMap<(String, String), Schema>>,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, org_id: &str, id: &str) -> Option<Schema> {
        self.schemas.read().get(&(org_id.to_string(), id.to_string())).cloned()
    }

    pub fn list(&self, org_id: &str) -> Vec<Schema> {
        self.schemas
            .read()
            .iter()
            .filter(|((o, _), _)| o == org_id)
            .map(|(_, s)| s.clone())
            .collect()
    }

    pub fn all(&self) -> Vec<(String, Schema)> {
        self.schemas.read().iter().map(|((o, _), s)| (o.clone(), s.clone())).collect()
    }

    /// Inserts, or replaces when `expected_version` matches the stored one
    /// (or is absent); replacement bumps the version.
    pub fn put(&self, org_id: &str, mut schema: Schema, expected_version: Option<u32>) -> Result<Schema, SchemaError> {
        schema.validate()?;
        let key = (org_id.to_string(), schema.id.clone());
        let mut map = self.schemas.write();
        if let Some(cur) = map.get(&key) {
            if let Some(exp) = expected_version {
                if exp != cur.version {
                    return Err(SchemaError::VersionConflict {
                        id: schema.id,
                        expected: exp,
                        found: cur.version,
                    });
                }
            }
            schema.version = cur.version + 1;
        } else {
            schema.version = schema.version.max(1);
        }
        map.insert(key, schema.clone());
        Ok(schema)
    }

    pub fn remove(&self, org_id: &str, id: &str) -> Option<Schema> {
        self.schemas.write().remove(&(org_id.to_string(), id.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_cas() {
        let r = SchemaRegistry::new();
        let s = Schema::new("s1", "Deals", vec![SchemaProperty::new("stage", "Stage", PropertyType::Text, "Deal stage")]);
        assert_eq!(r.put("o", s.clone(), None).unwrap().version, 1);
        assert_eq!(r.put("o", s.clone(), Some(1)).unwrap().version, 2);
        assert!(matches!(r.put("o", s.clone(), Some(1)), Err(SchemaError::VersionConflict { .. })));
        assert!(r.get("other", "s1").is_none());
        assert!(matches!(r.put("o", Schema::new("e", "E", vec![]), None), Err(SchemaError::EmptySchema)));
    }
}
