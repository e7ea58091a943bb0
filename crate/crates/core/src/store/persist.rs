//! Append-only JSON Lines persistence per org.
//!
//! Layout: `<root>/<org-dir>/log.jsonl` (mutations) and `snapshot.jsonl`
//! (one `put` line per live record, written by compaction). Restore replays
//! the snapshot, then the log; last write wins.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MemoryStore, StoreError, StoredVector};
use crate::model::MemoryEntry;

const LOG_FILE: &str = "log.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.jsonl";
const ENCODED_PREFIX: &str = "x-";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "camelCase")]
enum LogRecord {
    Put { entry: MemoryEntry, vector: Vec<f32> },
    Delete { id: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RestoreReport {
    pub org_id: String,
    pub entries: usize,
    pub lines_read: usize,
    pub corrupt_lines: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CompactionStats {
    pub org_id: String,
    pub lines_before: usize,
    pub snapshot_lines: usize,
}

pub(crate) struct OrgLog {
    out: BufWriter<File>,
}

impl OrgLog {
    pub(crate) fn open(root: &Path, org_id: &str) -> std::io::Result<Self> {
        let dir = root.join(encode_org_dir(org_id));
        fs::create_dir_all(&dir)?;
        let file = OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    fn append(&mut self, rec: &LogRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")
    }

    pub(crate) fn append_put(&mut self, s: &StoredVector) -> std::io::Result<()> {
        self.append(&LogRecord::Put {
            entry: s.entry.clone(),
            vector: s.vector.clone(),
        })
    }

    pub(crate) fn append_delete(&mut self, id: &str) -> std::io::Result<()> {
        self.append(&LogRecord::Delete { id: id.to_string() })
    }

    pub(crate) fn sync(&mut self) -> std::io::Result<()> {
        self.out.flush()?;
        self.out.get_ref().sync_data()
    }
}

/// Directory name for an org id; ids outside `[A-Za-z0-9_.-]` are hex-encoded.
pub(crate) fn encode_org_dir(org_id: &str) -> String {
    let plain = !org_id.is_empty()
        && !org_id.starts_with('.')
        && !org_id.starts_with(ENCODED_PREFIX)
        && org_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if plain {
        org_id.to_string()
    } else {
        format!("{ENCODED_PREFIX}{}", hex::encode(org_id.as_bytes()))
    }
}

pub(crate) fn decode_org_dir(name: &str) -> Option<String> {
    match name.strip_prefix(ENCODED_PREFIX) {
        Some(h) => String::from_utf8(hex::decode(h).ok()?).ok(),
        None if name.starts_with('.') => None,
        None => Some(name.to_string()),
    }
}

fn replay(
    path: &Path,
    items: &mut BTreeMap<String, StoredVector>,
    dim: usize,
    report: &mut RestoreReport,
) -> std::io::Result<usize> {
    if !path.exists() {
        return Ok(0);
    }
    let reader = BufReader::new(File::open(path)?);
    let mut lines = 0;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        report.lines_read += 1;
        match serde_json::from_str::<LogRecord>(&line) {
            Ok(LogRecord::Put { entry, vector }) if vector.len() == dim => {
                items.insert(entry.id.clone(), StoredVector { entry, vector });
            }
            Ok(LogRecord::Put { entry, vector }) => {
                report.corrupt_lines += 1;
                report.warnings.push(format!(
                    "{}:{}: entry {} has dimension {}",
                    path.display(),
                    n + 1,
                    entry.id,
                    vector.len()
                ));
            }
            Ok(LogRecord::Delete { id }) => {
                items.remove(&id);
            }
            Err(e) => {
                report.corrupt_lines += 1;
                report.warnings.push(format!("{}:{}: {e}", path.display(), n + 1));
            }
        }
    }
    Ok(lines)
}

fn count_lines(path: &Path) -> std::io::Result<usize> {
    if !path.exists() {
        return Ok(0);
    }
    let reader = BufReader::new(File::open(path)?);
    let mut n = 0;
    for line in reader.lines() {
        if !line?.trim().is_empty() {
            n += 1;
        }
    }
    Ok(n)
}

impl MemoryStore {
    fn org_dir(&self, org_id: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(encode_org_dir(org_id)))
    }

    /// Rebuilds an org partition from disk, replacing whatever is in memory.
    pub fn restore(&self, org_id: &str) -> Result<RestoreReport, StoreError> {
        let mut report = RestoreReport {
            org_id: org_id.to_string(),
            ..RestoreReport::default()
        };
        let Some(dir) = self.org_dir(org_id) else {
            report.entries = self.len(org_id);
            return Ok(report);
        };
        let mut items = BTreeMap::new();
        replay(&dir.join(SNAPSHOT_FILE), &mut items, self.dim, &mut report)?;
        replay(&dir.join(LOG_FILE), &mut items, self.dim, &mut report)?;
        for w in &report.warnings {
            tracing::warn!(org = org_id, "skipped record: {w}");
        }
        report.entries = items.len();
        let part = self.partition_or_create(org_id)?;
        part.write().items = items;
        Ok(report)
    }

    /// Flushes and syncs the org's log.
    pub fn persist(&self, org_id: &str) -> Result<(), StoreError> {
        if let Some(p) = self.partition(org_id) {
            if let Some(log) = &mut p.write().log {
                log.sync()?;
            }
        }
        Ok(())
    }

    /// Rewrites the snapshot with one line per live record and truncates the log.
    pub fn compact(&self, org_id: &str) -> Result<CompactionStats, StoreError> {
        let mut stats = CompactionStats {
            org_id: org_id.to_string(),
            ..CompactionStats::default()
        };
        let (Some(dir), Some(part)) = (self.org_dir(org_id), self.partition(org_id)) else {
            stats.snapshot_lines = self.len(org_id);
            stats.lines_before = stats.snapshot_lines;
            return Ok(stats);
        };
        let mut p = part.write();
        if let Some(log) = &mut p.log {
            log.sync()?;
        }
        stats.lines_before = count_lines(&dir.join(SNAPSHOT_FILE))? + count_lines(&dir.join(LOG_FILE))?;
        let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        {
            let mut out = BufWriter::new(File::create(&tmp)?);
            for s in p.items.values() {
                serde_json::to_writer(
                    &mut out,
                    &LogRecord::Put {
                        entry: s.entry.clone(),
                        vector: s.vector.clone(),
                    },
                )
                .map_err(std::io::Error::other)?;
                out.write_all(b"\n")?;
                stats.snapshot_lines += 1;
            }
            out.flush()?;
            out.get_ref().sync_all()?;
        }
        fs::rename(&tmp, dir.join(SNAPSHOT_FILE))?;
        File::create(dir.join(LOG_FILE))?.sync_all()?;
        let root = self.root.as_ref().expect("org dir implies root");
        p.log = Some(OrgLog::open(root, org_id)?);
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{reference_epoch, ManualClock};
    use crate::providers::{EmbeddingProvider, HashEmbedder};
    use std::sync::Arc;

    #[test]
    fn org_dir_encoding() {
        assert_eq!(encode_org_dir("acme-1"), "acme-1");
        let enc = encode_org_dir("a/b");
        assert!(enc.starts_with("x-"));
        assert_eq!(decode_org_dir(&enc).unwrap(), "a/b");
        assert_eq!(decode_org_dir(&encode_org_dir("x-y")).unwrap(), "x-y");
    }

    #[test]
    fn restore_and_compact() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(reference_epoch()));
        let e = HashEmbedder::new(32);
        let hash_before;
        {
            let s = MemoryStore::open(dir.path(), 32, clock.clone()).unwrap();
            for i in 0..10 {
                let text = format!("fact number {i}");
                let entry = MemoryEntry::fact(format!("m{}", i % 6), "org", &text, reference_epoch());
                s.upsert(entry, e.embed_one(&text).unwrap()).unwrap();
            }
            s.delete("org", "m0").unwrap();
            hash_before = s.snapshot_hash("org");
            let stats = s.compact("org").unwrap();
            assert_eq!(stats.lines_before, 11);
            assert_eq!(stats.snapshot_lines, 5);
            s.upsert(
                MemoryEntry::fact("m9", "org", "after compaction", reference_epoch()),
                e.embed_one("after compaction").unwrap(),
            )
            .unwrap();
            s.delete("org", "m9").unwrap();
        }
        let s = MemoryStore::open(dir.path(), 32, clock).unwrap();
        assert_eq!(s.len("org"), 5);
        assert_eq!(s.snapshot_hash("org"), hash_before);
    }

    #[test]
    fn corrupt_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(reference_epoch()));
        let e = HashEmbedder::new(16);
        {
            let s = MemoryStore::open(dir.path(), 16, clock.clone()).unwrap();
            s.upsert(
                MemoryEntry::fact("m1", "org", "kept", reference_epoch()),
                e.embed_one("kept").unwrap(),
            )
            .unwrap();
        }
        let log = dir.path().join("org").join(LOG_FILE);
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        writeln!(f, "{{not json").unwrap();
        drop(f);
        let s = MemoryStore::with_clock(16, clock);
        let mut s = s;
        s.root = Some(dir.path().to_path_buf());
        let report = s.restore("org").unwrap();
        assert_eq!(report.entries, 1);
        assert_eq!(report.corrupt_lines, 1);
    }
}
