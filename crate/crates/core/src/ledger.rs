//! Append-only run ledger: one JSON record per line in `ledger.jsonl`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cases::{MinorPatch, Verdict};
use crate::pipeline::{ScenarioResult, ScriptResult};

pub const LEDGER_FILE: &str = "ledger.jsonl";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ledger {path}, line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub case_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<MinorPatch>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub generation_id: String,
    pub helpful: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub operation: String,
    pub status: u16,
    pub message: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LedgerEvent {
    ScenarioGeneration(Box<ScenarioResult>),
    ScriptGeneration(Box<ScriptResult>),
    Verdict(VerdictRecord),
    Feedback(FeedbackRecord),
    Error(ErrorRecord),
}

impl LedgerEvent {
    pub fn generation_id(&self) -> Option<&str> {
        match self {
            LedgerEvent::ScenarioGeneration(r) => Some(&r.generation_id),
            LedgerEvent::ScriptGeneration(r) => Some(&r.generation_id),
            _ => None,
        }
    }
}

/// Writer handle. Appends from concurrent tasks are serialized and each
/// record is written with a single `write_all` of one line.
#[derive(Debug)]
pub struct Ledger {
    path: PathBuf,
    lock: Mutex<()>,
}

impl Ledger {
    /// Opens (creating if needed) the ledger inside `dir`.
    pub fn open(dir: &Path) -> Result<Self, LedgerError> {
        std::fs::create_dir_all(dir).map_err(|source| LedgerError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            path: dir.join(LEDGER_FILE),
            lock: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, event: &LedgerEvent) -> Result<(), LedgerError> {
        let mut line = serde_json::to_string(event).expect("ledger events serialize");
        line.push('\n');
        let io = |source| LedgerError::Io {
            path: self.path.clone(),
            source,
        };
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io)?;
        file.write_all(line.as_bytes()).map_err(io)
    }

    pub fn events(&self) -> Result<Vec<LedgerEvent>, LedgerError> {
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        read_events(&self.path)
    }
}

/// Reads a ledger file, or `dir/ledger.jsonl` when given a directory.
/// A missing file is an empty ledger.
pub fn read_events(path: &Path) -> Result<Vec<LedgerEvent>, LedgerError> {
    let path = if path.is_dir() {
        path.join(LEDGER_FILE)
    } else {
        path.to_path_buf()
    };
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(LedgerError::Io { path, source }),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LedgerError::Corrupt {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
