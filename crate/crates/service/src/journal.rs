//! Append-only JSONL event log, one file per session.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::api::CreateSessionRequest;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created { request: CreateSessionRequest },
    Labeled { labels: Vec<bool> },
}

#[derive(Debug)]
pub struct Journal {
    file: File,
}

pub fn path_for(dir: &Path, session_id: &str) -> PathBuf {
    dir.join(format!("{session_id}.jsonl"))
}

impl Journal {
    pub fn create(dir: &Path, session_id: &str) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path_for(dir, session_id))?;
        Ok(Journal { file })
    }

    pub fn append(&mut self, event: &Event) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }
}

/// `(session id, events)` for every log in `dir`, sorted by id. A torn last
/// line is dropped.
pub fn read_all(dir: &Path) -> std::io::Result<Vec<(String, Vec<Event>)>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    for path in paths {
        let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
            continue;
        };
        let mut events = Vec::new();
        for line in BufReader::new(File::open(&path)?).lines() {
            let line = line?;
            match serde_json::from_str::<Event>(&line) {
                Ok(e) => events.push(e),
                Err(e) => {
                    tracing::warn!(session = %id, error = %e, "dropping unreadable journal line");
                    break;
                }
            }
        }
        out.push((id, events));
    }
    Ok(out)
}
