//! Look-alike entities: same industry, shared name parts, similar roles and
//! deal sizes, each carrying one unique marker token.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use super::fixture::{fixture_engine, memorize_lines, FixtureCompleter};
use super::{ratio, Band, EvalError, ExperimentSpec, Manifest, Metric, MetricsReport};
use crate::model::CrmKeys;
use crate::providers::tokenize;
use crate::retrieval::RetrievalRequest;
use crate::store::{RecordScope, RetrievalFilter};

const ORG: &str = "eval-isolation";
const K: usize = 5;

const FIRST: [&str; 10] = ["Jordan", "Taylor", "Morgan", "Casey", "Riley", "Avery", "Quinn", "Jamie", "Drew", "Reese"];
const LAST: [&str; 10] = ["Lee", "Park", "Kim", "Chen", "Patel", "Shah", "Nguyen", "Garcia", "Lopez", "Singh"];
const ADJ: [&str; 10] = ["Summit", "Harbor", "Crest", "Pioneer", "Beacon", "Granite", "Meridian", "Cascade", "Keystone", "Prairie"];
const NOUN: [&str; 10] = ["Freight", "Cargo", "Transit", "Shipping", "Haulage", "Carriers", "Express", "Logistics", "Supply", "Routes"];
const ROLES: [&str; 4] = ["VP of Operations", "Director of Operations", "Head of Logistics", "Operations Manager"];
const CHANNELS: [&str; 3] = ["email", "phone calls", "video calls"];
const REGIONS: [&str; 4] = ["the Midwest", "the Southeast", "the Pacific Northwest", "the Mountain states"];
const CODENAMES: [&str; 5] = ["Atlas", "Borealis", "Cobalt", "Delta", "Ember"];

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Profile {
    pub record_id: String,
    pub name: String,
    pub company: String,
    pub marker: String,
    pub keys: CrmKeys,
    pub facts: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryType {
    Marker,
    Role,
    Deal,
    Timeline,
    Comparison,
}

const QUERY_TYPES: [QueryType; 5] = [QueryType::Marker, QueryType::Role, QueryType::Deal, QueryType::Timeline, QueryType::Comparison];

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Query {
    pub target: usize,
    pub query_type: QueryType,
    pub text: String,
    /// Scope keys, one identifier kind per query.
    pub keys: CrmKeys,
    /// Index into the target's facts that answers the query.
    pub expected_fact: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct IsolationFixture {
    pub profiles: Vec<Profile>,
    pub queries: Vec<Query>,
}

fn profile(i: usize, rng: &mut ChaCha8Rng) -> Profile {
    let (first, last) = (FIRST[i % 10], LAST[(i / 10) % 10]);
    let (adj, noun) = (ADJ[(i / 10) % 10], NOUN[(i * 3) % 10]);
    let name = format!("{first} {last}");
    let company = format!("{adj} {noun}");
    let marker = format!("{}{}", CODENAMES[i % CODENAMES.len()], 100 + i);
    let slug = format!("{adj}{noun}{i}").to_lowercase();
    let deal = 120 + rng.gen_range(0..10);
    let quarter = rng.gen_range(1..=4);
    let facts = vec![
        format!("{name} is the {} at {company}.", ROLES[rng.gen_range(0..ROLES.len())]),
        format!("{name} is evaluating a deal worth about ${deal},000 for {company}."),
        format!("{company} wants to go live in Q{quarter} next year."),
        format!("{name} prefers {} for follow ups.", CHANNELS[rng.gen_range(0..CHANNELS.len())]),
        format!("The internal codename for the {company} project is {marker}."),
        format!("{company} currently ships freight across {}.", REGIONS[rng.gen_range(0..REGIONS.len())]),
    ];
    let keys = CrmKeys {
        record_id: Some(format!("crm-{i:03}")),
        email: Some(format!("{}.{}@{slug}.example", first.to_lowercase(), last.to_lowercase())),
        website_url: Some(format!("https://www.{slug}.example")),
        phone_number: None,
        custom_identifiers: Some(BTreeMap::from([("accountNumber".to_string(), format!("ACC-{:04}", 1000 + i))])),
    };
    Profile {
        record_id: format!("crm-{i:03}"),
        name,
        company,
        marker,
        keys,
        facts,
    }
}

fn scope_keys(p: &Profile, kind: usize) -> CrmKeys {
    let mut k = CrmKeys::default();
    match kind % 4 {
        0 => k.record_id = p.keys.record_id.clone(),
        1 => k.email = p.keys.email.as_ref().map(|e| e.to_uppercase()),
        2 => k.website_url = p.keys.website_url.as_ref().map(|w| w.replace("https://www.", "")),
        _ => k.custom_identifiers = p.keys.custom_identifiers.clone(),
    }
    k
}

pub fn fixture(spec: &ExperimentSpec) -> IsolationFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size("entities", 100).clamp(2, 100);
    let profiles: Vec<Profile> = (0..n).map(|i| profile(i, &mut rng)).collect();
    let n_queries = spec.size("queries", 500);
    let queries = (0..n_queries)
        .map(|q| {
            let target = rng.gen_range(0..n);
            let query_type = QUERY_TYPES[q % QUERY_TYPES.len()];
            let p = &profiles[target];
            let other = &profiles[(target + 1 + rng.gen_range(0..n - 1)) % n];
            let (text, expected_fact) = match query_type {
                QueryType::Marker => (format!("What is the internal codename for the {} project?", p.company), 4),
                QueryType::Role => (format!("What role does {} hold?", p.name), 0),
                QueryType::Deal => (format!("How large is the deal {} is evaluating?", p.name), 1),
                QueryType::Timeline => (format!("When does {} want to go live?", p.company), 2),
                QueryType::Comparison => (
                    format!("Is the {} project codename {} the same as for {}?", other.company, other.marker, p.company),
                    4,
                ),
            };
            Query {
                target,
                query_type,
                text,
                keys: scope_keys(p, q / QUERY_TYPES.len()),
                expected_fact,
            }
        })
        .collect();
    IsolationFixture { profiles, queries }
}

pub fn manifest(fx: &IsolationFixture) -> Manifest {
    let mut m = Manifest::default();
    let mut token_owners: HashMap<String, BTreeSet<usize>> = HashMap::new();
    for (i, p) in fx.profiles.iter().enumerate() {
        for f in &p.facts {
            for t in tokenize(f) {
                token_owners.entry(t).or_default().insert(i);
            }
        }
    }
    let with_marker = fx
        .profiles
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            let mut toks = tokenize(&p.marker);
            let t = toks.next().unwrap_or_default();
            toks.next().is_none() && token_owners.get(&t).is_some_and(|o| o.len() == 1 && o.contains(i))
        })
        .count();
    m.check(
        "every entity has a unique marker token",
        with_marker == fx.profiles.len(),
        format!("{with_marker}/{} entities", fx.profiles.len()),
    );
    let ids: BTreeSet<&str> = fx.profiles.iter().map(|p| p.record_id.as_str()).collect();
    m.check("record ids distinct", ids.len() == fx.profiles.len(), format!("{} ids", ids.len()));
    let share_name = fx
        .profiles
        .iter()
        .filter(|p| {
            let first = p.name.split(' ').next().unwrap_or_default();
            fx.profiles.iter().filter(|q| q.name.starts_with(first)).count() > 1
        })
        .count();
    m.check(
        "high overlap: first names shared",
        fx.profiles.len() < 11 || share_name == fx.profiles.len(),
        format!("{share_name} entities share a first name with another"),
    );
    m.check(
        "query count",
        !fx.queries.is_empty(),
        format!("{} queries over {} types", fx.queries.len(), QUERY_TYPES.len()),
    );
    m
}

pub fn dataset(spec: &ExperimentSpec) -> Value {
    let fx = fixture(spec);
    json!({"fixture": fx, "manifest": manifest(&fx)})
}

pub fn run(spec: &ExperimentSpec) -> Result<MetricsReport, EvalError> {
    let fx = fixture(spec);
    let manifest = manifest(&fx);
    manifest.verify()?;
    let (engine, _clock) = fixture_engine(FixtureCompleter::new())?;
    let mut stored = 0;
    for p in &fx.profiles {
        stored += memorize_lines(&engine, ORG, Some(p.keys.clone()), &format!("profile {}", p.record_id), &p.facts)?.stored_facts;
    }

    let markers: Vec<String> = fx.profiles.iter().map(|p| p.marker.to_lowercase()).collect();
    let (mut total, mut leaked, mut marker_leaks, mut hits, mut empty) = (0, 0, 0, 0, 0);
    let mut by_type: BTreeMap<QueryType, (usize, usize)> = BTreeMap::new();
    for q in &fx.queries {
        let target = &fx.profiles[q.target];
        let mut req = RetrievalRequest::new(ORG, &q.text, K);
        req.filter = RetrievalFilter {
            record_id: Some(RecordScope::Keys(q.keys.clone())),
            ..RetrievalFilter::default()
        };
        let res = engine.retrieve(&req)?;
        if res.results.is_empty() {
            empty += 1;
        }
        let expected = &target.facts[q.expected_fact];
        let hit = res.results.iter().any(|r| &r.entry.text == expected);
        hits += usize::from(hit);
        let t = by_type.entry(q.query_type).or_default();
        t.0 += 1;
        t.1 += usize::from(hit);
        for r in &res.results {
            total += 1;
            if r.entry.record_id.as_deref() != Some(target.record_id.as_str()) {
                leaked += 1;
            }
            let toks: BTreeSet<String> = tokenize(&r.entry.text).collect();
            if markers.iter().enumerate().any(|(i, m)| i != q.target && toks.contains(m)) {
                marker_leaks += 1;
            }
        }
    }

    let metrics = vec![
        Metric::banded("leakage_rate", ratio(leaked, total), "results with a recordId other than the query target / results", Band::Exactly(0.0))
            .reference("zero true cross-entity leakage"),
        Metric::banded("foreign_marker_results", marker_leaks as f64, "results containing another entity's marker token", Band::Exactly(0.0)),
        Metric::banded("empty_result_queries", empty as f64, "queries whose scope resolved to nothing", Band::Exactly(0.0)),
        Metric::info("expected_fact_hit_rate", ratio(hits, fx.queries.len()), "queries whose answering fact is in the top k / queries"),
        Metric::info("results", total as f64, "results returned across queries"),
        Metric::info("stored_memories", stored as f64, "memories written across entities"),
    ];
    let per_type: Vec<Value> = by_type
        .iter()
        .map(|(t, (n, h))| json!({"queryType": t, "queries": n, "expectedFactHitRate": ratio(*h, *n)}))
        .collect();
    let details = json!({"entities": fx.profiles.len(), "queries": fx.queries.len(), "k": K, "perQueryType": per_type});
    Ok(MetricsReport::new(spec, manifest, metrics, details))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ExperimentId;

    #[test]
    fn e11_replay() {
        let r = run(&ExperimentSpec::new(ExperimentId::E11)).unwrap();
        println!("{}", r.table());
        println!("{}", r.details);
        assert!(r.pass);
    }
}
