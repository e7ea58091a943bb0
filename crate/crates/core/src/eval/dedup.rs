//! Five sources restating one entity's facts in different surface forms.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use super::fixture::{fixture_engine, memorize_lines, FixtureCompleter};
use super::{ratio, Band, EvalError, ExperimentSpec, Manifest, Metric, MetricsReport};
use crate::extraction::normalize_fact_text;
use crate::model::{CrmKeys, EngineConfig};
use crate::providers::{cosine, HashEmbedder};

const ORG: &str = "eval-dedup";
const RECORD: &str = "acct-northwind";

/// Pairs that differ in a single token and must both survive.
const NEAR_MISS: [(&str, &str); 6] = [
    ("Northwind Freight operates a warehouse in Denver.", "Northwind Freight operates a warehouse in Boise."),
    ("The fleet manager prefers quarterly review meetings.", "The fleet manager prefers monthly review meetings."),
    ("Northwind Freight signed a renewal in March 2024.", "Northwind Freight signed a renewal in March 2025."),
    ("Their procurement lead is based in Chicago.", "Their procurement lead is based in Dallas."),
    ("The pilot program covered forty delivery trucks.", "The pilot program covered sixty delivery trucks."),
    ("Billing for Northwind Freight runs through the Ohio office.", "Billing for Northwind Freight runs through the Texas office."),
];

/// Long facts that every source also restates with one extra word.
const RESTATED: [&str; 8] = [
    "Northwind Freight evaluated three routing vendors before choosing our platform for its regional network.",
    "The operations team wants automated alerts whenever a shipment misses its scheduled loading window.",
    "Their chief financial officer approved a budget increase tied to measurable fuel savings this year.",
    "Northwind Freight asked for a dedicated onboarding specialist during the first ninety days of rollout.",
    "The company plans to expand cold chain capacity across two new distribution centers next spring.",
    "Drivers complained that the previous mobile app crashed frequently when switching between offline modes.",
    "Security review requires single sign on integration with their existing identity provider before launch.",
    "Northwind Freight measures carrier performance using on time delivery rate and damage claim ratios.",
];

const OTHER: [&str; 20] = [
    "Northwind Freight employs about nine hundred people.",
    "The headquarters moved to a larger campus last autumn.",
    "Their preferred contract length is three years.",
    "The account is managed by Priya Raman.",
    "Weekly shipment volume averages twelve thousand parcels.",
    "Northwind Freight uses a legacy warehouse management system.",
    "Customer support tickets spike during holiday peaks.",
    "The board expects a return on investment within eighteen months.",
    "Their dispatch team works in two overlapping shifts.",
    "Northwind Freight recently won a grocery distribution contract.",
    "Sustainability reporting is a priority for their investors.",
    "The procurement process requires three competing quotes.",
    "Their fleet includes electric vans on urban routes.",
    "Northwind Freight declined the premium analytics add on.",
    "Invoices must reference a purchase order number.",
    "The operations director reports directly to the chief executive.",
    "Their peak season begins in early November.",
    "Northwind Freight outsources last mile delivery in rural areas.",
    "Training sessions should be recorded for new hires.",
    "The company values transparent pricing over discounts.",
];

const FILLERS: [&str; 4] = ["reportedly", "apparently", "currently", "also"];

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SourceLine {
    pub text: String,
    pub fact: usize,
    pub paraphrase: bool,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct DedupFixture {
    pub facts: Vec<String>,
    /// Indices into `facts` of each near-miss pair.
    pub near_miss: Vec<(usize, usize)>,
    pub restated: Vec<usize>,
    pub sources: Vec<Vec<SourceLine>>,
}

fn surface_variant(text: &str, style: u32) -> String {
    match style {
        0 => text.to_string(),
        1 => text.to_lowercase(),
        2 => text.to_uppercase(),
        3 => text.trim_end_matches('.').to_string(),
        _ => format!("{};", text.trim_end_matches('.').replacen(' ', "  ", 1)),
    }
}

fn paraphrase(text: &str, filler: &str) -> String {
    let mut words: Vec<&str> = text.split(' ').collect();
    words.insert(2, filler);
    words.join(" ")
}

pub fn fixture(spec: &ExperimentSpec) -> DedupFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut facts = Vec::new();
    let mut near_miss = Vec::new();
    for (a, b) in NEAR_MISS {
        near_miss.push((facts.len(), facts.len() + 1));
        facts.push(a.to_string());
        facts.push(b.to_string());
    }
    let restated: Vec<usize> = (facts.len()..facts.len() + RESTATED.len()).collect();
    facts.extend(RESTATED.iter().map(|s| s.to_string()));
    facts.extend(OTHER.iter().map(|s| s.to_string()));

    let n_sources = spec.size("sources", 5).max(1);
    let mut sources = Vec::new();
    for _ in 0..n_sources {
        let mut lines: Vec<SourceLine> = facts
            .iter()
            .enumerate()
            .map(|(i, f)| SourceLine {
                text: surface_variant(f, rng.gen_range(0..5)),
                fact: i,
                paraphrase: false,
            })
            .collect();
        for &i in &restated {
            lines.push(SourceLine {
                text: paraphrase(&facts[i], FILLERS[rng.gen_range(0..FILLERS.len())]),
                fact: i,
                paraphrase: true,
            });
        }
        lines.shuffle(&mut rng);
        sources.push(lines);
    }
    DedupFixture {
        facts,
        near_miss,
        restated,
        sources,
    }
}

pub fn manifest(fx: &DedupFixture, cfg: &EngineConfig) -> Manifest {
    let e = HashEmbedder::new(cfg.embedding_dim);
    let t = cfg.write_dedup_threshold;
    let vecs: Vec<Vec<f32>> = fx.facts.iter().map(|f| e.embed_text(f)).collect();
    let mut m = Manifest::default();
    m.check("unique facts", fx.facts.len() == 40, format!("{} facts", fx.facts.len()));
    m.check("sources", !fx.sources.is_empty(), format!("{} sources", fx.sources.len()));
    m.check("restated facts", fx.restated.len() == 8, format!("{} restated", fx.restated.len()));

    let mut max_pair = 0.0f64;
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            max_pair = max_pair.max(cosine(&vecs[i], &vecs[j]));
        }
    }
    m.check(
        "distinct facts below dedup threshold",
        max_pair < t,
        format!("max pairwise cosine {max_pair:.4} < {t}"),
    );
    let near: Vec<f64> = fx.near_miss.iter().map(|&(a, b)| cosine(&vecs[a], &vecs[b])).collect();
    let near_max = near.iter().copied().fold(0.0, f64::max);
    m.check(
        "near-miss pairs just below threshold",
        near.iter().all(|&c| c >= 0.8 && c < t),
        format!("near-miss cosines in [{:.4}, {near_max:.4}]", near.iter().copied().fold(1.0, f64::min)),
    );
    let mut min_variant = 1.0f64;
    let mut collisions = 0;
    for src in &fx.sources {
        let mut seen = HashMap::new();
        for l in src {
            min_variant = min_variant.min(cosine(&e.embed_text(&l.text), &vecs[l.fact]));
            if seen.insert(normalize_fact_text(&l.text), l.fact).is_some() {
                collisions += 1;
            }
        }
    }
    m.check(
        "restatements above dedup threshold",
        min_variant > t,
        format!("min restatement cosine {min_variant:.4} > {t}"),
    );
    m.check("no verbatim repeats within a source", collisions == 0, format!("{collisions} repeats"));
    m
}

pub fn dataset(spec: &ExperimentSpec) -> Value {
    let fx = fixture(spec);
    json!({"fixture": fx, "manifest": manifest(&fx, &EngineConfig::default())})
}

pub fn run(spec: &ExperimentSpec) -> Result<MetricsReport, EvalError> {
    let fx = fixture(spec);
    let (engine, _clock) = fixture_engine(FixtureCompleter::new())?;
    let manifest = manifest(&fx, engine.config());
    manifest.verify()?;

    let fact_of: HashMap<&str, usize> = fx
        .sources
        .iter()
        .flatten()
        .map(|l| (l.text.as_str(), l.fact))
        .collect();
    let (mut candidates, mut stored, mut skipped) = (0, 0, 0);
    let mut false_merges = Vec::new();
    let mut true_dupes_skipped = 0;
    let mut per_source = Vec::new();
    for (i, src) in fx.sources.iter().enumerate() {
        let lines: Vec<String> = src.iter().map(|l| l.text.clone()).collect();
        let report = memorize_lines(&engine, ORG, Some(CrmKeys::record(RECORD)), &format!("source {}", i + 1), &lines)?;
        candidates += report.candidates;
        stored += report.stored_facts;
        skipped += report.skipped_duplicates;
        for s in &report.skipped {
            let original = engine.store().get(ORG, &s.duplicate_of).map(|e| e.text);
            let same = match (fact_of.get(s.text.as_str()), original.as_deref().and_then(|t| fact_of.get(t))) {
                (Some(a), Some(b)) => a == b,
                _ => false,
            };
            if same {
                true_dupes_skipped += 1;
            } else {
                false_merges.push(json!({"skipped": s.text, "duplicateOf": original}));
            }
        }
        per_source.push(json!({
            "source": i + 1,
            "candidates": report.candidates,
            "stored": report.stored_facts,
            "skipped": report.skipped_duplicates,
        }));
    }

    let mut stored_per_fact: BTreeMap<usize, usize> = BTreeMap::new();
    for e in engine.store().list(ORG) {
        if let Some(&f) = fact_of.get(e.text.as_str()) {
            *stored_per_fact.entry(f).or_default() += 1;
        }
    }
    let facts_covered = (0..fx.facts.len()).filter(|f| stored_per_fact.contains_key(f)).count();
    let near_kept = fx
        .near_miss
        .iter()
        .filter(|(a, b)| stored_per_fact.contains_key(a) && stored_per_fact.contains_key(b))
        .count();
    let true_dupes = candidates - fx.facts.len().min(candidates);

    let metrics = vec![
        Metric::banded("dedup_rate", ratio(skipped, skipped + stored), "skipped / (skipped + stored)", Band::AtLeast(0.80))
            .reference("83.1% (162 skipped, 33 stored)"),
        Metric::banded("false_positive_merges", false_merges.len() as f64, "skipped candidates whose match is a different ground-truth fact", Band::Exactly(0.0))
            .reference("zero false positives"),
        Metric::banded("near_miss_pairs_preserved", ratio(near_kept, fx.near_miss.len()), "near-miss pairs with both facts stored / pairs", Band::Exactly(1.0)),
        Metric::banded("ground_truth_coverage", ratio(facts_covered, fx.facts.len()), "ground-truth facts with a stored entry / facts", Band::Exactly(1.0)),
        Metric::info("duplicate_recall", ratio(true_dupes_skipped, true_dupes), "correctly skipped restatements / restatement candidates"),
        Metric::info("candidates", candidates as f64, "post cross-chunk candidates across sources"),
        Metric::info("stored", stored as f64, "memories written"),
        Metric::info("skipped", skipped as f64, "candidates skipped as duplicates"),
    ];
    let details = json!({"perSource": per_source, "falseMerges": false_merges});
    Ok(MetricsReport::new(spec, manifest, metrics, details))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ExperimentId;

    #[test]
    fn e6_replay() {
        let r = run(&ExperimentSpec::new(ExperimentId::E6)).unwrap();
        println!("{}", r.table());
        println!("{:?}", r.manifest);
        assert!(r.pass);
    }
}
