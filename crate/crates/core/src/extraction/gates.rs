use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Token tables for the three heuristic gates; each list can be extended
/// per deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct GateConfig {
    pub pronouns: Vec<String>,
    pub dangling_starts: Vec<String>,
    pub relative_time: Vec<String>,
    /// Remove flagged facts before writing instead of only reporting them.
    pub drop_flagged: bool,
}

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|s| s.to_string()).collect()
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            pronouns: owned(&[
                "he", "she", "they", "him", "her", "them", "his", "hers", "their", "theirs", "it", "its",
            ]),
            dangling_starts: owned(&[
                "this",
                "that",
                "these",
                "those",
                "also",
                "additionally",
                "however",
                "and",
                "but",
                "so",
            ]),
            relative_time: owned(&[
                "yesterday",
                "today",
                "tomorrow",
                "recently",
                "soon",
                "last week",
                "last month",
                "next week",
                "next month",
                "next quarter",
            ]),
            drop_flagged: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FlaggedFacts {
    pub coreference: Vec<usize>,
    pub self_containment: Vec<usize>,
    pub temporal_anchoring: Vec<usize>,
}

impl FlaggedFacts {
    pub fn contains(&self, i: usize) -> bool {
        self.coreference.contains(&i) || self.self_containment.contains(&i) || self.temporal_anchoring.contains(&i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QualityGateReport {
    pub total: usize,
    pub coreference_score: f64,
    pub self_containment_score: f64,
    pub temporal_anchoring_score: f64,
    pub flagged_fact_indices: FlaggedFacts,
}

impl QualityGateReport {
    pub fn empty() -> Self {
        Self {
            total: 0,
            coreference_score: 1.0,
            self_containment_score: 1.0,
            temporal_anchoring_score: 1.0,
            flagged_fact_indices: FlaggedFacts::default(),
        }
    }
}

static ABSOLUTE_DATE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(?:1[89]|20)\d{2}\b|\b(?:jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|june?|july?|aug(?:ust)?|sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?)\.?\s+\d{1,2}(?:st|nd|rd|th)?\b",
    )
    .expect("date pattern")
});

fn words(text: &str) -> Vec<&str> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .collect()
}

fn has_pronoun(text: &str, cfg: &GateConfig) -> bool {
    words(text)
        .iter()
        .any(|w| cfg.pronouns.iter().any(|p| p.eq_ignore_ascii_case(w)))
}

const FUNCTION_WORDS: &[&str] = &["the", "a", "an", "i", "we", "you", "our", "my", "there", "on", "in", "at"];

fn lacks_context(text: &str, cfg: &GateConfig) -> bool {
    let ws = words(text);
    let Some(first) = ws.first() else { return true };
    if cfg.dangling_starts.iter().any(|d| d.eq_ignore_ascii_case(first)) {
        return true;
    }
    let named = ws.iter().any(|w| {
        let lower = w.to_lowercase();
        w.chars().next().is_some_and(char::is_uppercase)
            && !cfg.pronouns.contains(&lower)
            && !cfg.dangling_starts.contains(&lower)
            && !FUNCTION_WORDS.contains(&lower.as_str())
    });
    !named
}

fn relative_unanchored(text: &str, cfg: &GateConfig) -> bool {
    let lower = format!(" {} ", words(text).join(" ").to_lowercase());
    let relative = cfg.relative_time.iter().any(|t| lower.contains(&format!(" {} ", t.to_lowercase())));
    relative && !ABSOLUTE_DATE.is_match(text)
}

pub fn quality_gates<S: AsRef<str>>(facts: &[S], cfg: &GateConfig) -> QualityGateReport {
    if facts.is_empty() {
        return QualityGateReport::empty();
    }
    let mut flagged = FlaggedFacts::default();
    for (i, f) in facts.iter().enumerate() {
        let f = f.as_ref();
        if has_pronoun(f, cfg) {
            flagged.coreference.push(i);
        }
        if lacks_context(f, cfg) {
            flagged.self_containment.push(i);
        }
        if relative_unanchored(f, cfg) {
            flagged.temporal_anchoring.push(i);
        }
    }
    let n = facts.len() as f64;
    let score = |v: &Vec<usize>| 1.0 - v.len() as f64 / n;
    QualityGateReport {
        total: facts.len(),
        coreference_score: score(&flagged.coreference),
        self_containment_score: score(&flagged.self_containment),
        temporal_anchoring_score: score(&flagged.temporal_anchoring),
        flagged_fact_indices: flagged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_fact_scores_one() {
        let r = quality_gates(&["Acme Corp signed the renewal on 2024-03-02."], &GateConfig::default());
        assert_eq!(
            (r.coreference_score, r.self_containment_score, r.temporal_anchoring_score),
            (1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn pronoun_halves_coreference() {
        let r = quality_gates(
            &["He signed it.", "Acme Corp signed the renewal on 2024-03-02."],
            &GateConfig::default(),
        );
        assert_eq!(r.coreference_score, 0.5);
        assert_eq!(r.flagged_fact_indices.coreference, vec![0]);
    }

    #[test]
    fn relative_time_flagged() {
        let cfg = GateConfig::default();
        let r = quality_gates(&["The team met last week"], &cfg);
        assert_eq!(r.temporal_anchoring_score, 0.0);
        let ok = quality_gates(&["The Acme team met last week, on March 3"], &cfg);
        assert_eq!(ok.temporal_anchoring_score, 1.0);
    }

    #[test]
    fn dangling_start_flagged() {
        let r = quality_gates(&["However Acme declined."], &GateConfig::default());
        assert_eq!(r.self_containment_score, 0.0);
        assert_eq!(quality_gates::<&str>(&[], &GateConfig::default()), QualityGateReport::empty());
    }
}
