//! Append-only JSONL result store.
//!
//! Rows are grouped by run id; a run id is the content hash of the run's
//! configuration, so reruns of a changed config land under a new id instead
//! of mutating existing rows. Timestamps live outside the payload so that
//! byte-identical payloads certify reproducibility.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Grade,
    Probe,
    Candidate,
    Gain,
    Ablation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub kind: RecordKind,
    pub payload: serde_json::Value,
    /// Seconds since the Unix epoch at append time; excluded from
    /// reproducibility comparisons.
    pub timestamp: u64,
    pub code_version: String,
}

/// One directory of per-run JSONL files. Appends go to `<run_id>.jsonl`;
/// concurrent writers on different runs never touch the same file.
pub struct ResultStore {
    root: PathBuf,
}

impl ResultStore {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    fn run_path(&self, run_id: &str) -> PathBuf {
        self.root.join(format!("{run_id}.jsonl"))
    }

    pub fn append(
        &self,
        run_id: &str,
        kind: RecordKind,
        payload: serde_json::Value,
    ) -> Result<(), StoreError> {
        std::fs::create_dir_all(&self.root)?;
        let row = ResultRow {
            run_id: run_id.to_string(),
            kind,
            payload,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let mut line = serde_json::to_vec(&row)?;
        line.push(b'\n');
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.run_path(run_id))?;
        f.write_all(&line)?;
        Ok(())
    }

    /// All rows of one run, in append order.
    pub fn rows(&self, run_id: &str) -> Result<Vec<ResultRow>, StoreError> {
        let path = self.run_path(run_id);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .map(|l| serde_json::from_str(l).map_err(StoreError::from))
            .collect()
    }

    /// Run ids present in the store.
    pub fn run_ids(&self) -> Result<Vec<String>, StoreError> {
        if !self.root.exists() {
            return Ok(Vec::new());
        }
        let mut ids: Vec<String> = std::fs::read_dir(&self.root)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                if p.extension().map(|x| x == "jsonl").unwrap_or(false) {
                    p.file_stem().map(|s| s.to_string_lossy().into_owned())
                } else {
                    None
                }
            })
            .collect();
        ids.sort();
        Ok(ids)
    }
}
