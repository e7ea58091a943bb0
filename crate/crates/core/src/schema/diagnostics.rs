use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::EvaluationRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct DiagnosticThresholds {
    /// A criterion mean below this fraction of its weight is low.
    pub low_fraction: f64,
    /// A criterion mean above this fraction of its weight is high.
    pub high_fraction: f64,
    /// Standard deviation of per-record fractions that counts as high variance.
    pub variance_std_fraction: f64,
    /// Records whose total falls below this raise an alert.
    pub low_score_alert: f64,
}

impl Default for DiagnosticThresholds {
    fn default() -> Self {
        Self {
            low_fraction: 0.4,
            high_fraction: 0.8,
            variance_std_fraction: 0.25,
            low_score_alert: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CriterionStat {
    pub name: String,
    pub count: usize,
    pub mean: f64,
    /// Mean of score / weight.
    pub mean_fraction: f64,
    pub std_fraction: f64,
    pub min: f64,
    pub max: f64,
}

/// A run of consecutive records sharing model and schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrendSegment {
    pub model_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema_ref: Option<String>,
    pub from: DateTime<Utc>,
    pub to: DateTime<Utc>,
    pub count: usize,
    pub mean_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DiagnosticPattern {
    pub pattern: String,
    pub interpretation: String,
    pub action: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub criteria: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DiagnosticsReport {
    pub record_count: usize,
    pub low_score_alerts: Vec<String>,
    pub per_criterion_breakdown: Vec<CriterionStat>,
    pub trends: Vec<TrendSegment>,
    pub diagnostic_patterns: Vec<DiagnosticPattern>,
}

fn pattern(p: &str, i: &str, a: &str, criteria: Vec<String>) -> DiagnosticPattern {
    DiagnosticPattern {
        pattern: p.into(),
        interpretation: i.into(),
        action: a.into(),
        criteria,
    }
}

/// Breakdown, trends and recurring patterns over scored records inside the
/// optional `[from, to]` window. Records without scores are ignored.
pub fn aggregate_diagnostics(
    records: &[EvaluationRecord],
    window: Option<(DateTime<Utc>, DateTime<Utc>)>,
    th: &DiagnosticThresholds,
) -> DiagnosticsReport {
    let mut scored: Vec<&EvaluationRecord> = records
        .iter()
        .filter(|r| r.total_score.is_some())
        .filter(|r| window.is_none_or(|(a, b)| r.created_at >= a && r.created_at <= b))
        .collect();
    scored.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.id.cmp(&b.id)));
    let mut report = DiagnosticsReport {
        record_count: scored.len(),
        ..Default::default()
    };
    if scored.is_empty() {
        return report;
    }

    report.low_score_alerts = scored
        .iter()
        .filter(|r| r.total_score.unwrap_or(0.0) < th.low_score_alert)
        .map(|r| r.id.clone())
        .collect();

    let mut per: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &scored {
        for (name, score) in r.criterion_scores.iter().flatten() {
            if let Some(w) = r.criterion_weights.get(name) {
                per.entry(name.as_str()).or_default().push((*score, score / w));
            }
        }
    }
    for (name, xs) in &per {
        let n = xs.len() as f64;
        let mean = xs.iter().map(|x| x.0).sum::<f64>() / n;
        let mean_fraction = xs.iter().map(|x| x.1).sum::<f64>() / n;
        let var = xs.iter().map(|x| (x.1 - mean_fraction).powi(2)).sum::<f64>() / n;
        report.per_criterion_breakdown.push(CriterionStat {
            name: name.to_string(),
            count: xs.len(),
            mean,
            mean_fraction,
            std_fraction: var.sqrt(),
            min: xs.iter().map(|x| x.0).fold(f64::INFINITY, f64::min),
            max: xs.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max),
        });
    }

    for r in &scored {
        let total = r.total_score.unwrap_or(0.0);
        match report.trends.last_mut() {
            Some(seg) if seg.model_id == r.model_id && seg.schema_ref == r.schema_ref => {
                seg.mean_total = (seg.mean_total * seg.count as f64 + total) / (seg.count + 1) as f64;
                seg.count += 1;
                seg.to = r.created_at;
            }
            _ => report.trends.push(TrendSegment {
                model_id: r.model_id.clone(),
                schema_ref: r.schema_ref.clone(),
                from: r.created_at,
                to: r.created_at,
                count: 1,
                mean_total: total,
            }),
        }
    }

    let stat = |n: &str| report.per_criterion_breakdown.iter().find(|s| s.name == n);
    let low = |n: &str| stat(n).is_some_and(|s| s.mean_fraction < th.low_fraction);
    let high = |n: &str| stat(n).is_some_and(|s| s.mean_fraction > th.high_fraction);
    let mut patterns = Vec::new();
    if low("Context Utilization") && high("Completeness") {
        patterns.push(pattern(
            "Low Context Utilization, high Completeness",
            "Agent succeeded despite routing issues",
            "Improve governance metadata",
            vec!["Context Utilization".into(), "Completeness".into()],
        ));
    }
    if high("Context Utilization") && low("Completeness") {
        patterns.push(pattern(
            "High Context Utilization, low Completeness",
            "Appropriate context but insufficient memory",
            "Improve memory coverage",
            vec!["Context Utilization".into(), "Completeness".into()],
        ));
    }
    if low("Personalization") && high("Accuracy") {
        patterns.push(pattern(
            "Low Personalization, high Accuracy",
            "Entity memories sparse or not recalled",
            "Check density; review recall",
            vec!["Personalization".into(), "Accuracy".into()],
        ));
    }
    if report.per_criterion_breakdown.iter().all(|s| s.mean_fraction < th.low_fraction) {
        patterns.push(pattern(
            "Low across all criteria",
            "Model or prompt issue",
            "Review model & system prompt",
            Vec::new(),
        ));
    }
    let noisy: Vec<String> = report
        .per_criterion_breakdown
        .iter()
        .filter(|s| s.count >= 2 && s.std_fraction > th.variance_std_fraction)
        .map(|s| s.name.clone())
        .collect();
    if !noisy.is_empty() {
        patterns.push(pattern(
            "High variance within criterion",
            "Schema-data alignment issue",
            "Refine low-scoring types",
            noisy,
        ));
    }
    report.diagnostic_patterns = patterns;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::reference_epoch;
    use crate::schema::{ExecutionTrace, Rubric};
    use chrono::Duration;

    fn rec(i: i64, rubric: &Rubric, scores: &[f64], model: &str) -> EvaluationRecord {
        let s: BTreeMap<String, f64> = rubric.criteria.iter().zip(scores).map(|(c, v)| (c.name.clone(), *v)).collect();
        EvaluationRecord {
            id: format!("e{i}"),
            org_id: "o".into(),
            endpoint: "x".into(),
            rubric_name: rubric.name.clone(),
            criterion_weights: rubric.weights(),
            total_score: Some(s.values().sum()),
            criterion_scores: Some(s),
            trace: ExecutionTrace::default(),
            model_id: model.into(),
            schema_ref: None,
            created_at: reference_epoch() + Duration::hours(i),
            warnings: vec![],
            judge_error: None,
        }
    }

    fn actions(r: &DiagnosticsReport) -> Vec<&str> {
        r.diagnostic_patterns.iter().map(|p| p.action.as_str()).collect()
    }

    #[test]
    fn empty_window() {
        assert_eq!(aggregate_diagnostics(&[], None, &DiagnosticThresholds::default()), DiagnosticsReport::default());
    }

    #[test]
    fn all_low() {
        let d = Rubric::default_preset();
        let recs: Vec<_> = (0..3).map(|i| rec(i, &d, &[5.0, 6.0, 5.0, 4.0], "m")).collect();
        let r = aggregate_diagnostics(&recs, None, &DiagnosticThresholds::default());
        assert_eq!(actions(&r), vec!["Review model & system prompt"]);
        assert_eq!(r.low_score_alerts.len(), 3);
    }

    #[test]
    fn governance_and_density_patterns() {
        let d = Rubric::default_preset();
        let s = Rubric::sales();
        let recs = vec![
            rec(0, &d, &[24.0, 22.0, 23.0, 5.0], "m1"),
            rec(1, &d, &[24.0, 22.0, 23.0, 6.0], "m1"),
            rec(2, &s, &[6.0, 20.0, 18.0, 22.0], "m2"),
        ];
        let r = aggregate_diagnostics(&recs, None, &DiagnosticThresholds::default());
        assert_eq!(actions(&r), vec!["Improve governance metadata", "Check density; review recall"]);
        assert_eq!(r.trends.len(), 2);
        let windowed = aggregate_diagnostics(&recs, Some((reference_epoch(), reference_epoch())), &DiagnosticThresholds::default());
        assert_eq!(windowed.record_count, 1);
    }

    #[test]
    fn variance_pattern() {
        let d = Rubric::default_preset();
        let recs = vec![rec(0, &d, &[25.0, 20.0, 20.0, 20.0], "m"), rec(1, &d, &[0.0, 20.0, 20.0, 20.0], "m")];
        let r = aggregate_diagnostics(&recs, None, &DiagnosticThresholds::default());
        let p = r.diagnostic_patterns.iter().find(|p| p.action == "Refine low-scoring types").unwrap();
        assert_eq!(p.criteria, vec!["Accuracy"]);
    }
}
