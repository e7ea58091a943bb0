//! Organization-partitioned vector store.
//!
//! Each organization owns an independent partition guarded by its own lock,
//! so writers in one org never block readers or writers in another. Search is
//! an exact cosine scan; entity scoping is a hard pre-filter applied before
//! scoring, metadata filters are applied after.

mod persist;

pub use persist::{CompactionStats, RestoreReport};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SystemClock};
use crate::model::{resolve_in_directory, CrmKeys, MemoryEntry, MemoryType, ModelError};
use crate::providers::cosine;

use persist::OrgLog;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("vector dimension {got} does not match store dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("entry has no orgId")]
    MissingOrgId,
    #[error(transparent)]
    InvalidEntry(#[from] ModelError),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("unknown entry {0}")]
    UnknownEntry(String),
    #[error("storage i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// A stored record together with its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredVector {
    pub entry: MemoryEntry,
    pub vector: Vec<f32>,
}

impl StoredVector {
    pub fn entry_id(&self) -> &str {
        &self.entry.id
    }

    pub fn record_id(&self) -> Option<&str> {
        self.entry.record_id.as_deref()
    }
}

/// Entity scope of a read: an explicit record id or keys still to be resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RecordScope {
    Id(String),
    Keys(CrmKeys),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryTypeFilter {
    Memory,
    PropertyValue,
    #[default]
    Both,
}

impl MemoryTypeFilter {
    fn admits(self, t: MemoryType) -> bool {
        match self {
            MemoryTypeFilter::Both => true,
            MemoryTypeFilter::Memory => t == MemoryType::Memory,
            MemoryTypeFilter::PropertyValue => t == MemoryType::PropertyValue,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct RetrievalFilter {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_id: Option<RecordScope>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub persons: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub entities: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp_from: Option<DateTime<Utc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp_to: Option<DateTime<Utc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory_type: Option<MemoryTypeFilter>,
}

impl RetrievalFilter {
    pub fn record(id: impl Into<String>) -> Self {
        Self {
            record_id: Some(RecordScope::Id(id.into())),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if let (Some(from), Some(to)) = (self.timestamp_from, self.timestamp_to) {
            if from > to {
                return Err(StoreError::InvalidFilter("timestampFrom after timestampTo".into()));
            }
        }
        if let Some(RecordScope::Keys(k)) = &self.record_id {
            if k.is_empty() {
                return Err(StoreError::InvalidFilter("empty CRM keys".into()));
            }
        }
        Ok(())
    }

    /// Metadata post-filter. Persons/entities match when any listed value is
    /// present (case-insensitive); the time window is closed on both ends.
    fn admits_metadata(&self, e: &MemoryEntry) -> bool {
        let any_of = |wanted: &[String], have: &[String]| {
            wanted.is_empty()
                || wanted
                    .iter()
                    .any(|w| have.iter().any(|h| h.eq_ignore_ascii_case(w)))
        };
        if !any_of(&self.persons, &e.persons) || !any_of(&self.entities, &e.entities) {
            return false;
        }
        if let Some(loc) = &self.location {
            if !e.location.as_ref().is_some_and(|l| l.eq_ignore_ascii_case(loc)) {
                return false;
            }
        }
        let t = e.effective_time();
        if self.timestamp_from.is_some_and(|from| t < from) || self.timestamp_to.is_some_and(|to| t > to) {
            return false;
        }
        self.memory_type.unwrap_or_default().admits(e.entry_type)
    }
}

/// Scope for nearest-neighbour duplicate checks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DedupScope {
    pub record_id: Option<String>,
    pub memory_type: Option<MemoryType>,
    pub property_id: Option<String>,
}

fn nearest_in(
    items: &BTreeMap<String, StoredVector>,
    vector: &[f32],
    threshold: f64,
    scope: &DedupScope,
) -> Option<(String, f64)> {
    let mut best: Option<(String, f64)> = None;
    for s in items.values() {
        if scope.record_id.as_deref().is_some_and(|r| s.record_id() != Some(r)) {
            continue;
        }
        if scope.memory_type.is_some_and(|t| t != s.entry.entry_type) {
            continue;
        }
        if scope.property_id.is_some() && scope.property_id != s.entry.property_id {
            continue;
        }
        let sim = cosine(vector, &s.vector);
        if sim > threshold && best.as_ref().is_none_or(|(_, b)| sim > *b) {
            best = Some((s.entry.id.clone(), sim));
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEntry {
    pub entry: MemoryEntry,
    pub similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StoreStats {
    pub orgs: usize,
    pub entries: usize,
    pub memories: usize,
    pub property_values: usize,
}

#[derive(Default)]
pub(crate) struct Partition {
    items: BTreeMap<String, StoredVector>,
    log: Option<OrgLog>,
}

/// Exclusive view over one org partition, handed to maintenance jobs.
pub struct OrgPartition<'a> {
    partition: &'a mut Partition,
    now: DateTime<Utc>,
    dim: usize,
}

impl OrgPartition<'_> {
    pub fn now(&self) -> DateTime<Utc> {
        self.now
    }

    pub fn len(&self) -> usize {
        self.partition.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partition.items.is_empty()
    }

    pub fn nearest_above(&self, vector: &[f32], threshold: f64, scope: &DedupScope) -> Option<(String, f64)> {
        nearest_in(&self.partition.items, vector, threshold, scope)
    }

    /// Inserts or overwrites; the caller syncs at the batch boundary.
    pub fn put(&mut self, mut entry: MemoryEntry, vector: Vec<f32>) -> Result<String, StoreError> {
        entry.validate()?;
        if vector.len() != self.dim {
            return Err(StoreError::DimensionMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        if let Some(existing) = self.partition.items.get(&entry.id) {
            entry.created_at = existing.entry.created_at;
            entry.updated_at = self.now;
        }
        entry.score = None;
        let id = entry.id.clone();
        let stored = StoredVector { entry, vector };
        if let Some(log) = &mut self.partition.log {
            log.append_put(&stored)?;
        }
        self.partition.items.insert(id.clone(), stored);
        Ok(id)
    }

    pub fn items(&self) -> impl Iterator<Item = &StoredVector> {
        self.partition.items.values()
    }

    pub fn get(&self, id: &str) -> Option<&StoredVector> {
        self.partition.items.get(id)
    }

    pub fn remove(&mut self, id: &str) -> Result<(), StoreError> {
        if self.partition.items.remove(id).is_none() {
            return Err(StoreError::UnknownEntry(id.to_string()));
        }
        if let Some(log) = &mut self.partition.log {
            log.append_delete(id)?;
        }
        Ok(())
    }

    /// Rewrites an existing entry in place, keeping its vector.
    pub fn update_entry(&mut self, mut entry: MemoryEntry) -> Result<(), StoreError> {
        entry.validate()?;
        let slot = self
            .partition
            .items
            .get_mut(&entry.id)
            .ok_or_else(|| StoreError::UnknownEntry(entry.id.clone()))?;
        entry.updated_at = self.now;
        slot.entry = entry;
        if let Some(log) = &mut self.partition.log {
            log.append_put(slot)?;
        }
        Ok(())
    }

    pub fn sync(&mut self) -> Result<(), StoreError> {
        if let Some(log) = &mut self.partition.log {
            log.sync()?;
        }
        Ok(())
    }
}

pub struct MemoryStore {
    dim: usize,
    root: Option<PathBuf>,
    partitions: RwLock<HashMap<String, Arc<RwLock<Partition>>>>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for MemoryStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryStore")
            .field("dim", &self.dim)
            .field("root", &self.root)
            .finish()
    }
}

impl MemoryStore {
    pub fn in_memory(dim: usize) -> Self {
        Self::with_clock(dim, Arc::new(SystemClock))
    }

    pub fn with_clock(dim: usize, clock: Arc<dyn Clock>) -> Self {
        Self {
            dim,
            root: None,
            partitions: RwLock::new(HashMap::new()),
            clock,
        }
    }

    /// Opens (or creates) a persistent store rooted at `root`, replaying every
    /// org directory found there.
    pub fn open(root: impl AsRef<Path>, dim: usize, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root)?;
        let store = Self {
            dim,
            root: Some(root.clone()),
            partitions: RwLock::new(HashMap::new()),
            clock,
        };
        let mut orgs = Vec::new();
        for dir in std::fs::read_dir(&root)? {
            let dir = dir?;
            if dir.file_type()?.is_dir() {
                if let Some(org) = persist::decode_org_dir(&dir.file_name().to_string_lossy()) {
                    orgs.push(org);
                }
            }
        }
        orgs.sort();
        for org in orgs {
            store.restore(&org)?;
        }
        Ok(store)
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    fn partition(&self, org_id: &str) -> Option<Arc<RwLock<Partition>>> {
        self.partitions.read().get(org_id).cloned()
    }

    fn partition_or_create(&self, org_id: &str) -> Result<Arc<RwLock<Partition>>, StoreError> {
        if let Some(p) = self.partition(org_id) {
            return Ok(p);
        }
        let mut map = self.partitions.write();
        if let Some(p) = map.get(org_id) {
            return Ok(p.clone());
        }
        let log = match &self.root {
            Some(root) => Some(OrgLog::open(root, org_id)?),
            None => None,
        };
        let p = Arc::new(RwLock::new(Partition {
            items: BTreeMap::new(),
            log,
        }));
        map.insert(org_id.to_string(), p.clone());
        Ok(p)
    }

    pub fn orgs(&self) -> Vec<String> {
        let mut v: Vec<String> = self.partitions.read().keys().cloned().collect();
        v.sort();
        v
    }

    fn check(&self, entry: &MemoryEntry, vector: &[f32]) -> Result<(), StoreError> {
        if entry.org_id.is_empty() {
            return Err(StoreError::MissingOrgId);
        }
        entry.validate()?;
        if vector.len() != self.dim {
            return Err(StoreError::DimensionMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        Ok(())
    }

    pub fn upsert(&self, entry: MemoryEntry, vector: Vec<f32>) -> Result<String, StoreError> {
        let mut ids = self.upsert_batch(vec![(entry, vector)])?;
        Ok(ids.remove(0))
    }

    /// Writes a batch under one partition lock per org, syncing the log once
    /// at the end of the batch.
    pub fn upsert_batch(&self, batch: Vec<(MemoryEntry, Vec<f32>)>) -> Result<Vec<String>, StoreError> {
        for (e, v) in &batch {
            self.check(e, v)?;
        }
        let now = self.clock.now();
        let mut ids = Vec::with_capacity(batch.len());
        let mut touched: Vec<Arc<RwLock<Partition>>> = Vec::new();
        for (mut entry, vector) in batch {
            let part = self.partition_or_create(&entry.org_id)?;
            let mut p = part.write();
            if let Some(existing) = p.items.get(&entry.id) {
                entry.created_at = existing.entry.created_at;
                entry.updated_at = now;
            }
            entry.score = None;
            let id = entry.id.clone();
            let stored = StoredVector { entry, vector };
            if let Some(log) = &mut p.log {
                log.append_put(&stored)?;
            }
            p.items.insert(id.clone(), stored);
            drop(p);
            if !touched.iter().any(|t| Arc::ptr_eq(t, &part)) {
                touched.push(part);
            }
            ids.push(id);
        }
        for part in touched {
            if let Some(log) = &mut part.write().log {
                log.sync()?;
            }
        }
        Ok(ids)
    }

    pub fn get(&self, org_id: &str, id: &str) -> Option<MemoryEntry> {
        self.partition(org_id)?.read().items.get(id).map(|s| s.entry.clone())
    }

    pub fn get_stored(&self, org_id: &str, id: &str) -> Option<StoredVector> {
        self.partition(org_id)?.read().items.get(id).cloned()
    }

    pub fn delete(&self, org_id: &str, id: &str) -> Result<(), StoreError> {
        let part = self.partition(org_id).ok_or_else(|| StoreError::UnknownEntry(id.to_string()))?;
        let mut p = part.write();
        let now = self.clock.now();
        let mut view = OrgPartition {
            partition: &mut p,
            now,
            dim: self.dim,
        };
        view.remove(id)?;
        view.sync()
    }

    /// All entries of an org, ordered by id.
    pub fn list(&self, org_id: &str) -> Vec<MemoryEntry> {
        self.partition(org_id)
            .map(|p| p.read().items.values().map(|s| s.entry.clone()).collect())
            .unwrap_or_default()
    }

    pub fn list_stored(&self, org_id: &str) -> Vec<StoredVector> {
        self.partition(org_id)
            .map(|p| p.read().items.values().cloned().collect())
            .unwrap_or_default()
    }

    pub fn len(&self, org_id: &str) -> usize {
        self.partition(org_id).map_or(0, |p| p.read().items.len())
    }

    pub fn is_empty(&self, org_id: &str) -> bool {
        self.len(org_id) == 0
    }

    pub fn stats(&self) -> StoreStats {
        let map = self.partitions.read();
        let mut s = StoreStats {
            orgs: map.len(),
            ..StoreStats::default()
        };
        for p in map.values() {
            for item in p.read().items.values() {
                s.entries += 1;
                match item.entry.entry_type {
                    MemoryType::Memory => s.memories += 1,
                    MemoryType::PropertyValue => s.property_values += 1,
                }
            }
        }
        s
    }

    /// Known entity identities of an org as `(recordId, keys)` sorted by record id.
    pub fn entity_directory(&self, org_id: &str) -> Vec<(String, CrmKeys)> {
        match self.partition(org_id) {
            Some(p) => directory_of(&p.read().items),
            None => Vec::new(),
        }
    }

    /// Record ids present in an org (entries with an entity scope).
    pub fn record_ids(&self, org_id: &str) -> BTreeSet<String> {
        self.partition(org_id)
            .map(|p| {
                p.read()
                    .items
                    .values()
                    .filter_map(|s| s.entry.record_id.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Ranked cosine search within one org partition.
    ///
    /// An unknown org, or a record scope that resolves to no entity, yields
    /// an empty list rather than an error.
    pub fn search(
        &self,
        org_id: &str,
        query: &[f32],
        k: usize,
        filter: &RetrievalFilter,
    ) -> Result<Vec<ScoredEntry>, StoreError> {
        filter.validate()?;
        if query.len() != self.dim {
            return Err(StoreError::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        if k == 0 {
            return Err(StoreError::InvalidFilter("k must be at least 1".into()));
        }
        let Some(part) = self.partition(org_id) else {
            return Ok(Vec::new());
        };
        let p = part.read();
        let scope = match &filter.record_id {
            None => None,
            Some(RecordScope::Id(id)) => Some(id.clone()),
            Some(RecordScope::Keys(keys)) => match resolve_in_directory(keys, &directory_of(&p.items)) {
                Some(id) => Some(id),
                None => return Ok(Vec::new()),
            },
        };
        let mut hits: Vec<ScoredEntry> = p
            .items
            .values()
            .filter(|s| scope.as_ref().is_none_or(|r| s.record_id() == Some(r.as_str())))
            .filter(|s| filter.admits_metadata(&s.entry))
            .map(|s| ScoredEntry {
                entry: s.entry.clone(),
                similarity: cosine(query, &s.vector),
            })
            .collect();
        drop(p);
        sort_ranked(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    /// Most similar entry strictly above `threshold` within `scope`.
    pub fn nearest_above(
        &self,
        org_id: &str,
        vector: &[f32],
        threshold: f64,
        scope: &DedupScope,
    ) -> Option<(String, f64)> {
        let part = self.partition(org_id)?;
        let p = part.read();
        nearest_in(&p.items, vector, threshold, scope)
    }

    /// Runs `f` with exclusive access to one org partition, creating it if needed.
    pub fn exclusive<R>(
        &self,
        org_id: &str,
        f: impl FnOnce(&mut OrgPartition<'_>) -> R,
    ) -> Result<R, StoreError> {
        if org_id.is_empty() {
            return Err(StoreError::MissingOrgId);
        }
        let part = self.partition_or_create(org_id)?;
        let mut p = part.write();
        let mut view = OrgPartition {
            partition: &mut p,
            now: self.clock.now(),
            dim: self.dim,
        };
        Ok(f(&mut view))
    }

    /// SHA-256 over the canonical serialization of every live record, in id order.
    pub fn snapshot_hash(&self, org_id: &str) -> String {
        let mut buf = String::new();
        if let Some(p) = self.partition(org_id) {
            for s in p.read().items.values() {
                buf.push_str(&serde_json::to_string(s).expect("records serialize"));
                buf.push('\n');
            }
        }
        crate::model::sha256_hex(buf.as_bytes())
    }
}

fn directory_of(items: &BTreeMap<String, StoredVector>) -> Vec<(String, CrmKeys)> {
    let mut dir: BTreeMap<String, CrmKeys> = BTreeMap::new();
    for s in items.values() {
        let Some(rid) = &s.entry.record_id else { continue };
        let keys = s.entry.crm_keys().unwrap_or_else(|| CrmKeys::record(rid.clone()));
        let slot = dir.entry(rid.clone()).or_insert_with(|| CrmKeys::record(rid.clone()));
        if slot.email.is_none() {
            slot.email = keys.email;
        }
        if slot.website_url.is_none() {
            slot.website_url = keys.website_url;
        }
        if slot.phone_number.is_none() {
            slot.phone_number = keys.phone_number;
        }
        if let Some(custom) = keys.custom_identifiers {
            let m = slot.custom_identifiers.get_or_insert_with(BTreeMap::new);
            for (k, v) in custom {
                m.entry(k).or_insert(v);
            }
        }
    }
    dir.into_iter().collect()
}

/// Similarity descending, then newer first, then id ascending.
pub fn sort_ranked(hits: &mut [ScoredEntry]) {
    hits.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(b.entry.created_at.cmp(&a.entry.created_at))
            .then(a.entry.id.cmp(&b.entry.id))
    });
}
