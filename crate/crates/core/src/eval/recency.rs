//! Stale and fresh versions of the same fact for one contact, memorized
//! months apart, then queried with decay on and off.

use std::collections::BTreeSet;

use chrono::Duration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use super::fixture::{fixture_engine, memorize_lines, FixtureCompleter};
use super::{ratio, Band, EvalError, ExperimentSpec, Manifest, Metric, MetricsReport};
use crate::clock::reference_epoch;
use crate::model::{CrmKeys, EngineConfig};
use crate::providers::{cosine, HashEmbedder};
use crate::retrieval::{recency_factor, RetrievalRequest};
use crate::store::RetrievalFilter;

const ORG: &str = "eval-recency";
const K: usize = 5;
const STALE_DAYS: (i64, i64) = (74, 270);
const FRESH_DAYS: (i64, i64) = (0, 57);

/// `(attribute phrase, stale value, fresh value)`.
const CATEGORIES: [(&str, &str, &str); 15] = [
    ("primary database", "MySQL", "PostgreSQL"),
    ("CRM platform", "Salesforce", "HubSpot"),
    ("cloud provider", "Azure", "AWS"),
    ("headquarters city", "Austin", "Denver"),
    ("economic buyer", "Dana", "Marcus"),
    ("annual software budget", "modest", "expanded"),
    ("preferred contract term", "annual", "multiyear"),
    ("preferred contact channel", "email", "phone"),
    ("engineering headcount", "forty", "seventy"),
    ("main competitor", "Globex", "Initech"),
    ("renewal month", "March", "September"),
    ("billing currency", "euros", "dollars"),
    ("deployment model", "onpremise", "cloud"),
    ("support tier", "standard", "premium"),
    ("backend language", "Java", "Go"),
];

const COMPANIES: [&str; 10] = ["Acme", "Birchwood", "Copperline", "Driftwood", "Evergreen", "Foxglove", "Goldleaf", "Hawthorne", "Ironbark", "Juniper"];
const SUFFIXES: [&str; 3] = ["Labs", "Systems", "Works"];

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ConflictPair {
    pub record_id: String,
    pub category: String,
    pub stale: String,
    pub fresh: String,
    pub stale_age_days: i64,
    pub fresh_age_days: i64,
    pub background: Vec<String>,
    pub query: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecencyFixture {
    pub pairs: Vec<ConflictPair>,
}

pub fn fixture(spec: &ExperimentSpec) -> RecencyFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size("pairs", 30).max(1);
    let pairs = (0..n)
        .map(|i| {
            let (attr, old, new) = CATEGORIES[i % CATEGORIES.len()];
            let company = format!("{} {}", COMPANIES[i % COMPANIES.len()], SUFFIXES[(i / COMPANIES.len()) % SUFFIXES.len()]);
            ConflictPair {
                record_id: format!("contact-{i:02}"),
                category: attr.to_string(),
                stale: format!("{company}'s {attr} is {old}."),
                fresh: format!("{company}'s {attr} is now {new}."),
                stale_age_days: rng.gen_range(STALE_DAYS.0..=STALE_DAYS.1),
                fresh_age_days: rng.gen_range(FRESH_DAYS.0..=FRESH_DAYS.1),
                background: vec![
                    format!("{company} met with our account team at a regional trade show."),
                    format!("The {company} champion asked for a reference customer in their industry."),
                ],
                query: format!("What is {company}'s {attr}?"),
            }
        })
        .collect();
    RecencyFixture { pairs }
}

pub fn manifest(fx: &RecencyFixture, cfg: &EngineConfig) -> Manifest {
    let e = HashEmbedder::new(cfg.embedding_dim);
    let mut m = Manifest::default();
    let categories: BTreeSet<&str> = fx.pairs.iter().map(|p| p.category.as_str()).collect();
    m.check("pairs", !fx.pairs.is_empty(), format!("{} pairs", fx.pairs.len()));
    m.check(
        "categories",
        categories.len() == fx.pairs.len().min(CATEGORIES.len()),
        format!("{} categories", categories.len()),
    );
    let in_range = fx.pairs.iter().all(|p| {
        (STALE_DAYS.0..=STALE_DAYS.1).contains(&p.stale_age_days) && (FRESH_DAYS.0..=FRESH_DAYS.1).contains(&p.fresh_age_days)
    });
    m.check("age ranges", in_range, format!("stale {STALE_DAYS:?} days, fresh {FRESH_DAYS:?} days"));
    m.check(
        "stale older than fresh",
        fx.pairs.iter().all(|p| p.stale_age_days > p.fresh_age_days),
        "every pair",
    );
    let max_cos = fx
        .pairs
        .iter()
        .map(|p| cosine(&e.embed_text(&p.stale), &e.embed_text(&p.fresh)))
        .fold(0.0, f64::max);
    m.check(
        "both versions survive write dedup",
        max_cos < cfg.write_dedup_threshold,
        format!("max stale/fresh cosine {max_cos:.4}"),
    );
    m
}

pub fn dataset(spec: &ExperimentSpec) -> Value {
    let fx = fixture(spec);
    json!({"fixture": fx, "manifest": manifest(&fx, &EngineConfig::default())})
}

pub fn run(spec: &ExperimentSpec) -> Result<MetricsReport, EvalError> {
    let fx = fixture(spec);
    let (engine, clock) = fixture_engine(FixtureCompleter::new())?;
    let manifest = manifest(&fx, engine.config());
    manifest.verify()?;
    let now = reference_epoch();
    let half_life = engine.config().recency_half_life_days;

    for p in &fx.pairs {
        let keys = Some(CrmKeys::record(&p.record_id));
        clock.set(now - Duration::days(STALE_DAYS.1 + 30));
        memorize_lines(&engine, ORG, keys.clone(), "background", &p.background)?;
        clock.set(now - Duration::days(p.stale_age_days));
        memorize_lines(&engine, ORG, keys.clone(), "earlier call", std::slice::from_ref(&p.stale))?;
        clock.set(now - Duration::days(p.fresh_age_days));
        memorize_lines(&engine, ORG, keys, "latest call", std::slice::from_ref(&p.fresh))?;
    }
    clock.set(now);

    let (mut fresh_first, mut fresh_first_no_decay, mut surfaced, mut stored_both) = (0, 0, 0, 0);
    let mut rows = Vec::new();
    for p in &fx.pairs {
        let texts: Vec<String> = engine
            .store()
            .list(ORG)
            .into_iter()
            .filter(|e| e.record_id.as_deref() == Some(p.record_id.as_str()))
            .map(|e| e.text)
            .collect();
        stored_both += usize::from(texts.contains(&p.stale) && texts.contains(&p.fresh));
        let mut req = RetrievalRequest::new(ORG, &p.query, K);
        req.filter = RetrievalFilter::record(&p.record_id);
        let decayed = engine.retrieve(&req)?;
        req.recency_decay = false;
        let flat = engine.retrieve(&req)?;
        let pos = |res: &crate::retrieval::RetrievalResult, t: &str| res.results.iter().position(|r| r.entry.text == t);
        let first = decayed.results.first().is_some_and(|r| r.entry.text == p.fresh);
        fresh_first += usize::from(first);
        fresh_first_no_decay += usize::from(flat.results.first().is_some_and(|r| r.entry.text == p.fresh));
        if let (Some(f), Some(s)) = (pos(&decayed, &p.fresh), pos(&decayed, &p.stale)) {
            surfaced += usize::from(f < s);
        }
        rows.push(json!({
            "recordId": p.record_id,
            "category": p.category,
            "staleAgeDays": p.stale_age_days,
            "freshAgeDays": p.fresh_age_days,
            "freshFirst": first,
        }));
    }

    let n = fx.pairs.len();
    let at_half_life = recency_factor(now - Duration::days(38), now, half_life);
    let required = n - n / 30;
    let metrics = vec![
        Metric::banded("fresh_first_rate", ratio(fresh_first, n), "pairs whose fresh fact ranks first with decay / pairs", Band::AtLeast(ratio(required, n)))
            .reference("fresh fact ranked first in every pair"),
        Metric::banded("decay_factor_at_38_days", at_half_life, "2^(-38 / halfLifeDays)", Band::Within { target: 0.5, tolerance: 1e-9 }),
        Metric::banded("both_versions_stored", ratio(stored_both, n), "pairs with stale and fresh both stored / pairs", Band::Exactly(1.0)),
        Metric::info("conflict_detection_rate", ratio(surfaced, n), "pairs with both versions in the top k and fresh above stale / pairs")
            .reference("83.3% at the answer level with a live model"),
        Metric::info("fresh_first_rate_without_decay", ratio(fresh_first_no_decay, n), "pairs whose fresh fact ranks first on raw similarity / pairs"),
    ];
    Ok(MetricsReport::new(spec, manifest, metrics, json!({"k": K, "pairs": rows})))
}
