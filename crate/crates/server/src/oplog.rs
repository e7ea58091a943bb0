//! Append-only JSON-lines record of mutating requests.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde_json::Value;

#[derive(Debug, Default)]
pub struct OpLog {
    sink: Option<(PathBuf, Mutex<File>)>,
}

impl OpLog {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            sink: Some((path.to_path_buf(), Mutex::new(file))),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|(p, _)| p.as_path())
    }

    /// Writes one line; failures are logged and otherwise ignored so a full
    /// disk does not take the service down.
    pub fn append(&self, record: &Value) {
        let Some((path, file)) = &self.sink else { return };
        let mut line = record.to_string();
        line.push('\n');
        let mut f = file.lock();
        if let Err(e) = f.write_all(line.as_bytes()).and_then(|_| f.flush()) {
            tracing::error!(path = %path.display(), error = %e, "operation log write failed");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("logs/ops.jsonl");
        let log = OpLog::open(&p).unwrap();
        log.append(&json!({"op": "a"}));
        log.append(&json!({"op": "b"}));
        let text = std::fs::read_to_string(&p).unwrap();
        let ops: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(ops, vec![json!({"op": "a"}), json!({"op": "b"})]);
        OpLog::disabled().append(&json!({}));
    }
}
