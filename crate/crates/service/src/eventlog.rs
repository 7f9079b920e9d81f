//! Append-only session event log, replayed on startup.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use kctutor_core::engine::InteractionRecord;
use kctutor_core::KcId;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Create {
        session_id: String,
        tree: String,
        params: String,
        history: Vec<InteractionRecord>,
        at_ms: u64,
    },
    Answer {
        session_id: String,
        kc: KcId,
        correct: bool,
        at_ms: u64,
    },
}

#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl EventLog {
    /// Opens `path` for appending and returns the events already in it.
    pub fn open(path: &Path) -> Result<(EventLog, Vec<Event>), ServiceError> {
        let io = |source| ServiceError::Io { path: path.display().to_string(), source };
        let mut events = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let ev = serde_json::from_str(&line)
                    .map_err(|e| ServiceError::Replay { line: i + 1, message: e.to_string() })?;
                events.push(ev);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok((EventLog { path: path.to_path_buf(), file: Mutex::new(file) }, events))
    }

    pub fn append(&self, event: &Event) -> Result<(), ServiceError> {
        let mut line = serde_json::to_string(event).expect("event serializes");
        line.push('\n');
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        f.write_all(line.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|source| ServiceError::Io { path: self.path.display().to_string(), source })
    }
}
