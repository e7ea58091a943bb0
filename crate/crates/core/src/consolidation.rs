//! Background merge-and-prune over one org partition.

use std::collections::{BTreeMap, BTreeSet};

use chrono::Duration;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{EngineConfig, MemoryEntry, MemoryType, ModelError};
use crate::providers::cosine;
use crate::store::{CompactionStats, MemoryStore, StoreError, StoredVector};

pub const MERGED_FROM_ATTRIBUTE: &str = "mergedFrom";

#[derive(Debug, thiserror::Error)]
pub enum ConsolidationError {
    #[error(transparent)]
    Config(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SkipReason {
    BelowMinCount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MergeGroup {
    pub survivor_id: String,
    pub absorbed_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConsolidationReport {
    pub org_id: String,
    pub merged: Vec<MergeGroup>,
    pub pruned: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped_reason: Option<SkipReason>,
    pub dry_run: bool,
    pub memories_before: usize,
    pub memories_after: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = x;
        while self.0[c] != r {
            let next = self.0[c];
            self.0[c] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

fn newer(a: &MemoryEntry, b: &MemoryEntry) -> bool {
    (a.created_at, std::cmp::Reverse(&a.id)) > (b.created_at, std::cmp::Reverse(&b.id))
}

fn union_into(dst: &mut Vec<String>, src: &[String]) {
    for s in src {
        if !dst.iter().any(|d| d.eq_ignore_ascii_case(s)) {
            dst.push(s.clone());
        }
    }
}

struct Plan {
    merged: Vec<MergeGroup>,
    updated: Vec<MemoryEntry>,
    pruned: Vec<String>,
}

/// Computes merge and prune decisions without touching the store.
fn plan(memories: &[&StoredVector], config: &EngineConfig, now: chrono::DateTime<chrono::Utc>) -> Plan {
    let mut scopes: BTreeMap<Option<&str>, Vec<&StoredVector>> = BTreeMap::new();
    for m in memories {
        scopes.entry(m.record_id()).or_default().push(m);
    }
    let cutoff = now - Duration::days(config.retention_days);
    let mut out = Plan {
        merged: Vec::new(),
        updated: Vec::new(),
        pruned: Vec::new(),
    };
    for (scope, items) in scopes {
        let n = items.len();
        let mut uf = UnionFind::new(n);
        for i in 0..n {
            for j in (i + 1)..n {
                if cosine(&items[i].vector, &items[j].vector) > config.consolidation_merge_threshold {
                    uf.union(i, j);
                }
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            let root = uf.find(i);
            groups.entry(root).or_default().push(i);
        }
        let mut live: Vec<&MemoryEntry> = Vec::new();
        for members in groups.values() {
            let survivor_idx = members
                .iter()
                .copied()
                .reduce(|a, b| if newer(&items[b].entry, &items[a].entry) { b } else { a })
                .expect("non-empty group");
            let survivor = &items[survivor_idx].entry;
            if members.len() == 1 {
                live.push(survivor);
                continue;
            }
            let mut merged = survivor.clone();
            let mut absorbed: Vec<String> = Vec::new();
            for &m in members {
                if m == survivor_idx {
                    continue;
                }
                let e = &items[m].entry;
                union_into(&mut merged.keywords, &e.keywords);
                union_into(&mut merged.persons, &e.persons);
                union_into(&mut merged.entities, &e.entities);
                absorbed.push(e.id.clone());
            }
            absorbed.sort();
            let mut lineage: BTreeSet<String> = merged
                .custom_attributes
                .get(MERGED_FROM_ATTRIBUTE)
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .unwrap_or_default();
            lineage.extend(absorbed.iter().cloned());
            merged.custom_attributes.insert(
                MERGED_FROM_ATTRIBUTE.to_string(),
                Value::from(lineage.into_iter().collect::<Vec<_>>()),
            );
            out.merged.push(MergeGroup {
                survivor_id: survivor.id.clone(),
                absorbed_ids: absorbed,
            });
            out.updated.push(merged);
            live.push(survivor);
        }

        let stale: Vec<&MemoryEntry> = live.iter().copied().filter(|e| e.created_at < cutoff).collect();
        let protect = if scope.is_some() && stale.len() == live.len() {
            stale.iter().copied().reduce(|a, b| if newer(b, a) { b } else { a })
        } else {
            None
        };
        for e in stale {
            if protect.is_some_and(|p| p.id == e.id) {
                continue;
            }
            out.pruned.push(e.id.clone());
        }
    }
    out.merged.sort_by(|a, b| a.survivor_id.cmp(&b.survivor_id));
    out.updated.retain(|u| !out.pruned.contains(&u.id));
    out.pruned.sort();
    out
}

/// Merges near-duplicate open-set memories within each entity scope and
/// prunes those past the retention window, never leaving an entity without
/// an open-set memory. Property values are untouched.
pub fn consolidate(
    store: &MemoryStore,
    org_id: &str,
    config: &EngineConfig,
    dry_run: bool,
) -> Result<ConsolidationReport, ConsolidationError> {
    config.validate()?;
    let report = store.exclusive(org_id, |part| {
        let memories: Vec<&StoredVector> = part.items().filter(|s| s.entry.entry_type == MemoryType::Memory).collect();
        let mut report = ConsolidationReport {
            org_id: org_id.to_string(),
            merged: Vec::new(),
            pruned: Vec::new(),
            skipped_reason: None,
            dry_run,
            memories_before: memories.len(),
            memories_after: memories.len(),
            errors: Vec::new(),
        };
        if memories.len() < config.consolidation_min_org_memories {
            report.skipped_reason = Some(SkipReason::BelowMinCount);
            return report;
        }
        let plan = plan(&memories, config, part.now());
        let absorbed: usize = plan.merged.iter().map(|g| g.absorbed_ids.len()).sum();
        report.memories_after = memories.len() - absorbed - plan.pruned.len();
        report.merged = plan.merged;
        report.pruned = plan.pruned;
        if dry_run {
            for g in &report.merged {
                tracing::info!(org = org_id, survivor = %g.survivor_id, absorbed = ?g.absorbed_ids, "would merge");
            }
            for id in &report.pruned {
                tracing::info!(org = org_id, id = %id, "would prune");
            }
            return report;
        }
        for e in plan.updated {
            if let Err(err) = part.update_entry(e) {
                report.errors.push(err.to_string());
            }
        }
        let doomed = report
            .merged
            .iter()
            .flat_map(|g| g.absorbed_ids.iter())
            .chain(report.pruned.iter())
            .cloned()
            .collect::<Vec<_>>();
        for id in doomed {
            if let Err(err) = part.remove(&id) {
                report.errors.push(err.to_string());
            }
        }
        if let Err(err) = part.sync() {
            report.errors.push(err.to_string());
        }
        report
    })?;
    Ok(report)
}

/// Rewrites the org's persisted log in snapshot form.
pub fn compact(store: &MemoryStore, org_id: &str) -> Result<CompactionStats, StoreError> {
    store.compact(org_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{reference_epoch, ManualClock};
    use crate::providers::{EmbeddingProvider, HashEmbedder};
    use std::sync::Arc;

    fn store() -> (MemoryStore, HashEmbedder) {
        let clock = Arc::new(ManualClock::new(reference_epoch()));
        (MemoryStore::with_clock(256, clock), HashEmbedder::new(256))
    }

    fn put(s: &MemoryStore, e: &HashEmbedder, id: &str, rec: &str, text: &str, age_days: i64) {
        let mut m = MemoryEntry::fact(id, "o", text, reference_epoch() - Duration::days(age_days)).with_record(rec);
        m.keywords = vec![id.to_string()];
        s.upsert(m, e.embed_one(text).unwrap()).unwrap();
    }

    #[test]
    fn small_org_skipped() {
        let (s, e) = store();
        for i in 0..9 {
            put(&s, &e, &format!("m{i}"), "e1", &format!("fact {i} about widgets"), 0);
        }
        let r = consolidate(&s, "o", &EngineConfig::default(), false).unwrap();
        assert_eq!(r.skipped_reason, Some(SkipReason::BelowMinCount));
    }

    #[test]
    fn sole_memory_protection() {
        let (s, e) = store();
        for i in 0..5 {
            put(&s, &e, &format!("old{i}"), "e1", &format!("stale observation number {i} on pricing"), 400 + i);
        }
        for i in 0..5 {
            put(&s, &e, &format!("new{i}"), "e2", &format!("fresh observation number {i} on rollout"), i);
        }
        let r = consolidate(&s, "o", &EngineConfig::default(), false).unwrap();
        assert_eq!(r.pruned.len(), 4);
        let left: Vec<String> = s.list("o").into_iter().filter(|m| m.record_id.as_deref() == Some("e1")).map(|m| m.id).collect();
        assert_eq!(left, vec!["old0"]);
    }

    #[test]
    fn merges_exact_duplicates_with_lineage() {
        let (s, e) = store();
        put(&s, &e, "a", "e1", "Acme Corp uses Postgres for billing", 3);
        put(&s, &e, "b", "e1", "acme corp uses postgres for billing.", 1);
        for i in 0..10 {
            put(&s, &e, &format!("x{i}"), "e1", &format!("unrelated item {i} {}", "z".repeat(i + 1)), 0);
        }
        let before = s.snapshot_hash("o");
        let dry = consolidate(&s, "o", &EngineConfig::default(), true).unwrap();
        assert_eq!(s.snapshot_hash("o"), before);
        let r = consolidate(&s, "o", &EngineConfig::default(), false).unwrap();
        assert_eq!(dry.merged, r.merged);
        assert_eq!(r.merged, vec![MergeGroup { survivor_id: "b".into(), absorbed_ids: vec!["a".into()] }]);
        let b = s.get("o", "b").unwrap();
        assert_eq!(b.keywords, vec!["b", "a"]);
        assert_eq!(b.custom_attributes[MERGED_FROM_ATTRIBUTE], serde_json::json!(["a"]));
        let hash = s.snapshot_hash("o");
        let again = consolidate(&s, "o", &EngineConfig::default(), false).unwrap();
        assert!(again.merged.is_empty() && again.pruned.is_empty());
        assert_eq!(s.snapshot_hash("o"), hash);
    }

    #[test]
    fn bad_threshold_order_refused() {
        let (s, _) = store();
        let cfg = EngineConfig {
            consolidation_merge_threshold: 0.90,
            ..EngineConfig::default()
        };
        assert!(matches!(consolidate(&s, "o", &cfg, false), Err(ConsolidationError::Config(_))));
    }
}
