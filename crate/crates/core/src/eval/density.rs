//! Entities holding 0 to 30 memories each, measured by how many memories
//! reach retrieval and the token-budgeted entity context at each tier.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use super::fixture::{fixture_engine, memorize_lines, FixtureCompleter};
use super::{Band, EvalError, ExperimentSpec, Manifest, Metric, MetricsReport};
use crate::engine::ErrorKind;
use crate::model::{CrmKeys, EngineConfig};
use crate::providers::{cosine, HashEmbedder};
use crate::retrieval::RetrievalRequest;
use crate::store::RetrievalFilter;

const ORG: &str = "eval-density";
pub const TIERS: [(&str, usize); 6] = [("sparse", 0), ("minimal", 3), ("light", 7), ("moderate", 12), ("rich", 20), ("full", 30)];
/// Quality scores a live judge gave each tier; quoted, not measured here.
const PUBLISHED_SCORE: [f64; 6] = [69.3, 86.0, 88.0, 84.4, 85.2, 88.3];
const K: usize = 30;
const GENEROUS_BUDGET: usize = 4000;
const TIGHT_BUDGET: usize = 150;

const CONTACTS: [&str; 8] = ["Alex Moreno", "Sam Okafor", "Dana Whitfield", "Lee Harrow", "Nina Castell", "Omar Qureshi", "Tess Lindqvist", "Ravi Mehta"];
const COMPANIES: [&str; 8] = ["Brightwater Dental", "Copperfield Roofing", "Lakeside Vets", "Ridgeline Bakery", "Tidewater Clinics", "Oakmont Florists", "Summit Physio", "Harborview Optics"];

/// Thirty facts about one contact, one topic each.
const TEMPLATES: [&str; 30] = [
    "{n} runs marketing for {c}.",
    "{c} has eleven locations across the state.",
    "{n} prefers short emails sent before nine in the morning.",
    "{c} renewed its scheduling contract last January.",
    "{n} mentioned budget pressure from rising rent.",
    "{c} uses a paper intake form at the front desk.",
    "{n} asked about text message appointment reminders.",
    "{c} lost two receptionists over the summer.",
    "{n} reports to a managing partner named Ellis.",
    "{c} plans to open a new site near the airport.",
    "{n} complained that the old portal logged users out often.",
    "{c} saw no-show rates climb to fourteen percent.",
    "{n} enjoys trail running on weekends.",
    "{c} is considering a loyalty program for repeat clients.",
    "{n} attended our spring webinar on online booking.",
    "{c} pays invoices quarterly by bank transfer.",
    "{n} wants weekly reports emailed as spreadsheets.",
    "{c} partners with a local insurer for referrals.",
    "{n} dislikes long sales calls and prefers demos.",
    "{c} switched payroll vendors this year.",
    "{n} needs approval from finance above five thousand dollars.",
    "{c} has a busy season every December.",
    "{n} previously worked at a hospital network.",
    "{c} gets most new clients from search ads.",
    "{n} asked whether reviews could be collected automatically.",
    "{c} stores records on an aging office server.",
    "{n} responded well to the customer story about Lakeshore.",
    "{c} requires vendors to sign a data agreement.",
    "{n} is evaluating a competitor called SlotWise.",
    "{c} measures success by weekly booked appointments.",
];

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct DensityEntity {
    pub record_id: String,
    pub tier: String,
    pub contact: String,
    pub company: String,
    pub memories: Vec<String>,
    pub task: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct DensityFixture {
    pub entities: Vec<DensityEntity>,
}

pub fn fixture(spec: &ExperimentSpec) -> DensityFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let per_tier = spec.size("entitiesPerTier", 5).max(1);
    let mut entities = Vec::new();
    for (t, (tier, n)) in TIERS.iter().enumerate() {
        for j in 0..per_tier {
            let i = t * per_tier + j;
            let contact = CONTACTS[i % CONTACTS.len()];
            let company = format!("{} {}", COMPANIES[(i / CONTACTS.len() + i) % COMPANIES.len()], i);
            let mut order: Vec<usize> = (0..TEMPLATES.len()).collect();
            order.shuffle(&mut rng);
            let memories = order[..*n]
                .iter()
                .map(|&k| TEMPLATES[k].replace("{n}", contact).replace("{c}", &company))
                .collect();
            entities.push(DensityEntity {
                record_id: format!("density-{tier}-{j}"),
                tier: tier.to_string(),
                contact: contact.to_string(),
                company: company.clone(),
                memories,
                task: format!("Write a personalized follow-up email to {contact} at {company}."),
            });
        }
    }
    DensityFixture { entities }
}

pub fn manifest(fx: &DensityFixture, cfg: &EngineConfig) -> Manifest {
    let e = HashEmbedder::new(cfg.embedding_dim);
    let mut m = Manifest::default();
    let mut counts: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut max_cos = 0.0f64;
    for ent in &fx.entities {
        counts.entry(ent.tier.as_str()).or_default().push(ent.memories.len());
        let v: Vec<Vec<f32>> = ent.memories.iter().map(|t| e.embed_text(t)).collect();
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                max_cos = max_cos.max(cosine(&v[i], &v[j]));
            }
        }
    }
    let sizes_ok = TIERS
        .iter()
        .all(|(t, n)| counts.get(t).is_some_and(|c| c.iter().all(|x| x == n)));
    m.check("tier sizes", sizes_ok, format!("{:?}", TIERS.map(|t| t.1)));
    m.check(
        "memories survive write dedup",
        max_cos < cfg.write_dedup_threshold,
        format!("max within-entity cosine {max_cos:.4}"),
    );
    m
}

pub fn dataset(spec: &ExperimentSpec) -> Value {
    let fx = fixture(spec);
    json!({"fixture": fx, "manifest": manifest(&fx, &EngineConfig::default())})
}

#[derive(Debug, Default, Clone, Copy)]
struct Sums {
    entities: usize,
    stored: usize,
    recalled: usize,
    included: usize,
    tokens: usize,
    included_tight: usize,
}

fn context_counts(engine: &crate::engine::Engine, keys: &CrmKeys, budget: usize) -> Result<(usize, usize), EvalError> {
    match engine.entity_context(ORG, keys, budget, None) {
        Ok(c) => Ok((c.included_memory_ids.len(), c.tokens_used)),
        Err(e) if e.kind == ErrorKind::NotFound => Ok((0, 0)),
        Err(e) => Err(e.into()),
    }
}

pub fn run(spec: &ExperimentSpec) -> Result<MetricsReport, EvalError> {
    let fx = fixture(spec);
    let (engine, _clock) = fixture_engine(FixtureCompleter::new())?;
    let manifest = manifest(&fx, engine.config());
    manifest.verify()?;

    let mut sums: BTreeMap<&str, Sums> = BTreeMap::new();
    for ent in &fx.entities {
        let keys = CrmKeys::record(&ent.record_id);
        let s = sums.entry(ent.tier.as_str()).or_default();
        s.entities += 1;
        if !ent.memories.is_empty() {
            s.stored += memorize_lines(&engine, ORG, Some(keys.clone()), "account notes", &ent.memories)?.stored_facts;
        }
        let mut req = RetrievalRequest::new(ORG, &ent.task, K);
        req.filter = RetrievalFilter::record(&ent.record_id);
        s.recalled += engine.retrieve(&req)?.results.len();
        let (included, tokens) = context_counts(&engine, &keys, GENEROUS_BUDGET)?;
        s.included += included;
        s.tokens += tokens;
        s.included_tight += context_counts(&engine, &keys, TIGHT_BUDGET)?.0;
    }

    let avg = |x: usize, n: usize| x as f64 / n.max(1) as f64;
    let mut metrics = Vec::new();
    let mut curve = Vec::new();
    for (i, (tier, n)) in TIERS.iter().enumerate() {
        let s = sums.get(tier).copied().unwrap_or_default();
        let target = *n as f64;
        let reference = format!("{tier} ({n}): judge score {}/100", PUBLISHED_SCORE[i]);
        metrics.push(
            Metric::banded(&format!("avg_recalled_{n}"), avg(s.recalled, s.entities), "mean retrieved memories per entity at k=30", Band::Exactly(target))
                .reference(&reference),
        );
        metrics.push(Metric::banded(
            &format!("avg_included_{n}"),
            avg(s.included, s.entities),
            &format!("mean observations admitted to entity context at {GENEROUS_BUDGET} tokens"),
            Band::Exactly(target),
        ));
        curve.push(json!({
            "tier": tier,
            "memories": n,
            "entities": s.entities,
            "avgStored": avg(s.stored, s.entities),
            "avgRecalled": avg(s.recalled, s.entities),
            "avgIncluded": avg(s.included, s.entities),
            "avgContextTokens": avg(s.tokens, s.entities),
            "avgIncludedTightBudget": avg(s.included_tight, s.entities),
            "publishedJudgeScore": PUBLISHED_SCORE[i],
        }));
    }
    let tight: Vec<f64> = TIERS
        .iter()
        .map(|(t, _)| sums.get(t).map_or(0.0, |s| avg(s.included_tight, s.entities)))
        .collect();
    metrics.push(Metric::info(
        "tight_budget_plateau",
        tight.iter().copied().fold(0.0, f64::max),
        &format!("max mean observations admitted at {TIGHT_BUDGET} tokens across tiers"),
    ));
    let details = json!({
        "k": K,
        "budgets": {"generous": GENEROUS_BUDGET, "tight": TIGHT_BUDGET},
        "curve": curve,
        "note": "judge scores need a live model and are quoted for context only",
    });
    Ok(MetricsReport::new(spec, manifest, metrics, details))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ExperimentId;

    #[test]
    fn e2_replay() {
        let r = run(&ExperimentSpec::new(ExperimentId::E2)).unwrap();
        println!("{}", r.table());
        println!("{}", r.details);
        assert!(r.pass);
    }
}
