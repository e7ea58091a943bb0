use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::SchemaError;
use crate::model::sha256_hex;
use crate::providers::{CompletionProvider, CompletionRequest, PromptKind};
use crate::store::MemoryStore;

const JUDGE_TEMPERATURE: f64 = 0.0;
const SCORE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Criterion {
    pub name: String,
    pub weight: f64,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Rubric {
    pub name: String,
    pub criteria: Vec<Criterion>,
}

fn c(name: &str, weight: f64, description: &str) -> Criterion {
    Criterion {
        name: name.to_string(),
        weight,
        description: description.to_string(),
    }
}

impl Rubric {
    pub fn default_preset() -> Self {
        Self {
            name: "default".into(),
            criteria: vec![
                c("Accuracy", 25.0, "Claims are correct and consistent with the supplied context."),
                c("Relevance", 25.0, "The output addresses the task that was asked."),
                c("Completeness", 25.0, "Nothing the task requires is missing."),
                c("Context Utilization", 25.0, "Retrieved memories and governance context are used where they apply."),
            ],
        }
    }

    pub fn sales() -> Self {
        Self {
            name: "sales".into(),
            criteria: vec![
                c("Personalization", 30.0, "Specific to the prospect, using known entity facts."),
                c("Value Proposition", 25.0, "States a clear, relevant benefit."),
                c("CTA", 20.0, "Ends with one concrete next step."),
                c("Tone", 25.0, "Matches brand voice and the audience."),
            ],
        }
    }

    pub fn support() -> Self {
        Self {
            name: "support".into(),
            criteria: vec![
                c("Problem Understanding", 25.0, "Restates the customer's issue correctly."),
                c("Solution Accuracy", 30.0, "The fix is correct and policy-compliant."),
                c("Clarity", 25.0, "Steps are easy to follow."),
                c("Empathy", 20.0, "Acknowledges the customer's situation."),
            ],
        }
    }

    pub fn research() -> Self {
        Self {
            name: "research".into(),
            criteria: vec![
                c("Thoroughness", 30.0, "Covers the question's scope."),
                c("Source Quality", 25.0, "Relies on credible, attributable sources."),
                c("Analysis", 25.0, "Draws sound conclusions from the evidence."),
                c("Organization", 20.0, "Structured so findings are easy to locate."),
            ],
        }
    }

    pub fn presets() -> Vec<Self> {
        vec![Self::default_preset(), Self::sales(), Self::support(), Self::research()]
    }

    pub fn preset(name: &str) -> Option<Self> {
        Self::presets().into_iter().find(|r| r.name.eq_ignore_ascii_case(name))
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.criteria.is_empty() {
            return Err(SchemaError::InvalidRubric(format!("{} has no criteria", self.name)));
        }
        let mut names = BTreeSet::new();
        for cr in &self.criteria {
            if !(cr.weight > 0.0) || cr.name.trim().is_empty() {
                return Err(SchemaError::InvalidRubric(format!("{}: criterion `{}` is malformed", self.name, cr.name)));
            }
            if !names.insert(cr.name.as_str()) {
                return Err(SchemaError::InvalidRubric(format!("{}: duplicate criterion `{}`", self.name, cr.name)));
            }
        }
        let total: f64 = self.criteria.iter().map(|c| c.weight).sum();
        if (total - 100.0).abs() > SCORE_TOLERANCE {
            return Err(SchemaError::InvalidRubric(format!("{}: weights sum to {total}, not 100", self.name)));
        }
        Ok(())
    }

    pub fn weights(&self) -> BTreeMap<String, f64> {
        self.criteria.iter().map(|c| (c.name.clone(), c.weight)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RecallLogEntry {
    pub entry_id: String,
    pub used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GovernanceRating {
    pub variable_id: String,
    pub helpfulness: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ExecutionTrace {
    pub conversation_summary: String,
    pub tool_usage_log: Vec<Value>,
    pub memory_recall_log: Vec<RecallLogEntry>,
    pub memory_creation_log: Vec<String>,
    pub governance_log: Vec<GovernanceRating>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct EvaluationInput {
    pub org_id: String,
    pub endpoint: String,
    pub input: String,
    pub output: String,
    pub trace: ExecutionTrace,
    /// Free-form label for the schema in force, used to annotate trends.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvaluationRecord {
    pub id: String,
    pub org_id: String,
    pub endpoint: String,
    pub rubric_name: String,
    pub criterion_weights: BTreeMap<String, f64>,
    /// Absent when the judge failed; the trace is kept regardless.
    pub criterion_scores: Option<BTreeMap<String, f64>>,
    pub total_score: Option<f64>,
    pub trace: ExecutionTrace,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_ref: Option<String>,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_error: Option<String>,
}

impl EvaluationRecord {
    /// Stored total matches the sum of criterion scores, and each score is
    /// within its weight.
    pub fn is_consistent(&self) -> bool {
        match (&self.criterion_scores, self.total_score) {
            (None, None) => true,
            (Some(s), Some(t)) => {
                let in_range = s.iter().all(|(k, v)| {
                    self.criterion_weights.get(k).is_some_and(|w| *v >= 0.0 && *v <= w + SCORE_TOLERANCE)
                });
                in_range && (s.values().sum::<f64>() - t).abs() <= 1e-6
            }
            _ => false,
        }
    }
}

/// Append-only evaluation store, optionally mirrored to a JSONL file.
#[derive(Debug, Default)]
pub struct EvaluationLog {
    records: Mutex<Vec<EvaluationRecord>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl EvaluationLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads an existing log, refusing it if any record's total disagrees
    /// with its criterion scores.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, SchemaError> {
        let path = path.as_ref().to_path_buf();
        let io = |e: std::io::Error| SchemaError::Log(format!("{}: {e}", path.display()));
        let mut records = Vec::new();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(&path).map_err(io)?).lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: EvaluationRecord = serde_json::from_str(&line)
                    .map_err(|e| SchemaError::Log(format!("line {}: {e}", n + 1)))?;
                if !r.is_consistent() {
                    return Err(SchemaError::Log(format!("record {} fails the total-score check", r.id)));
                }
                records.push(r);
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        Ok(Self {
            records: Mutex::new(records),
            file: Some(Mutex::new(file)),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&self, record: EvaluationRecord) -> Result<(), SchemaError> {
        if !record.is_consistent() {
            return Err(SchemaError::Log(format!("record {} fails the total-score check", record.id)));
        }
        let mut records = self.records.lock();
        if records.iter().any(|r| r.id == record.id) {
            return Err(SchemaError::Log(format!("record {} already exists", record.id)));
        }
        if let Some(f) = &self.file {
            let line = serde_json::to_string(&record).map_err(|e| SchemaError::Log(e.to_string()))?;
            let mut f = f.lock();
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(|e| SchemaError::Log(e.to_string()))?;
        }
        records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self, org_id: &str) -> Vec<EvaluationRecord> {
        self.records.lock().iter().filter(|r| r.org_id == org_id).cloned().collect()
    }
}

/// Scores one interaction against `rubric` and appends the record to `log`.
///
/// The judge sees the rubric before the output and trace. Scores are
/// clamped to `[0, weight]`; a criterion the judge omits scores 0. On judge
/// failure the record is still written, without scores.
pub fn evaluate_interaction(
    input: &EvaluationInput,
    rubric: &Rubric,
    completer: &dyn CompletionProvider,
    store: Option<&MemoryStore>,
    log: &EvaluationLog,
    now: DateTime<Utc>,
) -> Result<EvaluationRecord, SchemaError> {
    rubric.validate()?;
    if input.org_id.is_empty() {
        return Err(SchemaError::InvalidInput("orgId is required".into()));
    }
    if let Some(s) = store {
        for r in &input.trace.memory_recall_log {
            if s.get(&input.org_id, &r.entry_id).is_none() {
                return Err(SchemaError::UnknownRecallEntry(r.entry_id.clone()));
            }
        }
    }
    let payload = json!({
        "rubric": rubric,
        "input": input.input,
        "output": input.output,
        "trace": input.trace,
    });
    let mut record = EvaluationRecord {
        id: String::new(),
        org_id: input.org_id.clone(),
        endpoint: input.endpoint.clone(),
        rubric_name: rubric.name.clone(),
        criterion_weights: rubric.weights(),
        criterion_scores: None,
        total_score: None,
        trace: input.trace.clone(),
        model_id: completer.model_id(),
        schema_ref: input.schema_ref.clone(),
        created_at: now,
        warnings: Vec::new(),
        judge_error: None,
    };
    match completer.complete(&CompletionRequest::new(PromptKind::RubricScore, payload, JUDGE_TEMPERATURE)) {
        Ok(resp) => {
            let mut scores = BTreeMap::new();
            for cr in &rubric.criteria {
                let raw = resp["scores"].get(&cr.name).and_then(Value::as_f64);
                let v = match raw {
                    Some(v) if v.is_finite() => v,
                    _ => {
                        record.warnings.push(format!("no score for `{}`; recorded as 0", cr.name));
                        0.0
                    }
                };
                let clamped = v.clamp(0.0, cr.weight);
                if clamped != v {
                    record.warnings.push(format!("`{}` score {v} clamped to {clamped}", cr.name));
                }
                scores.insert(cr.name.clone(), clamped);
            }
            record.total_score = Some(scores.values().sum());
            record.criterion_scores = Some(scores);
        }
        Err(e) => {
            tracing::warn!(org = %input.org_id, error = %e, "rubric judge failed; trace kept");
            record.judge_error = Some(e.to_string());
        }
    }
    for w in &record.warnings {
        tracing::warn!(org = %input.org_id, "{w}");
    }
    let seed = format!("{}\u{1f}{}\u{1f}{}\u{1f}{}", input.org_id, input.endpoint, now.to_rfc3339(), log.len());
    record.id = format!("eval-{}", &sha256_hex(seed.as_bytes())[..20]);
    log.append(record.clone())?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::reference_epoch;
    use crate::providers::{Matcher, ScriptedCompleter};

    fn input() -> EvaluationInput {
        EvaluationInput {
            org_id: "o".into(),
            endpoint: "email".into(),
            output: "Hi".into(),
            ..Default::default()
        }
    }

    #[test]
    fn preset_weights() {
        let table: Vec<(String, Vec<(String, f64)>)> = Rubric::presets()
            .into_iter()
            .map(|r| (r.name.clone(), r.criteria.iter().map(|c| (c.name.clone(), c.weight)).collect()))
            .collect();
        assert_eq!(table[1].1[0], ("Personalization".to_string(), 30.0));
        for r in Rubric::presets() {
            r.validate().unwrap();
        }
        let mut bad = Rubric::sales();
        bad.criteria[0].weight = 31.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scores_and_clamp() {
        let c = ScriptedCompleter::builder()
            .always(PromptKind::RubricScore, json!({"scores": {"Accuracy": 30, "Relevance": 25, "Completeness": 25, "Context Utilization": 25}}))
            .build();
        let log = EvaluationLog::in_memory();
        let r = evaluate_interaction(&input(), &Rubric::default_preset(), &c, None, &log, reference_epoch()).unwrap();
        assert_eq!(r.total_score, Some(100.0));
        assert_eq!(r.warnings.len(), 1);
        let req = &c.requests()[0];
        assert_eq!(req.payload.as_object().unwrap().keys().next().unwrap(), "rubric");
    }

    #[test]
    fn judge_failure_keeps_trace_and_log_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("evaluations.jsonl");
        let c = ScriptedCompleter::builder().fail(PromptKind::RubricScore, Matcher::Any, "down").build();
        let mut inp = input();
        inp.trace.conversation_summary = "asked about pricing".into();
        {
            let log = EvaluationLog::open(&path).unwrap();
            let r = evaluate_interaction(&inp, &Rubric::sales(), &c, None, &log, reference_epoch()).unwrap();
            assert!(r.total_score.is_none() && r.judge_error.is_some());
            assert_eq!(r.trace.conversation_summary, "asked about pricing");
        }
        assert_eq!(EvaluationLog::open(&path).unwrap().len(), 1);
        std::fs::write(
            &path,
            r#"{"id":"x","orgId":"o","endpoint":"e","rubricName":"default","criterionWeights":{"A":100.0},"criterionScores":{"A":50.0},"totalScore":60.0,"trace":{},"modelId":"m","createdAt":"2026-01-01T00:00:00Z"}"#,
        )
        .unwrap();
        assert!(EvaluationLog::open(&path).is_err());
    }

    #[test]
    fn recall_log_must_reference_entries() {
        let store = MemoryStore::in_memory(8);
        let mut inp = input();
        inp.trace.memory_recall_log.push(RecallLogEntry {
            entry_id: "ghost".into(),
            used: true,
        });
        let err = evaluate_interaction(&inp, &Rubric::default_preset(), &ScriptedCompleter::default(), Some(&store), &EvaluationLog::in_memory(), reference_epoch());
        assert!(matches!(err, Err(SchemaError::UnknownRecallEntry(_))));
    }
}
