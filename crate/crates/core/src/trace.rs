//! Append-only run records.
//!
//! A run directory holds `manifest.json`, the canonical `config.json` it was
//! produced from, and one directory per subject with JSON Lines streams
//! (`schedule`, `enriched`, `transcript`, `env_states`, `events`). Every line
//! is a [`TraceEvent`]; sequence numbers start at 1 and have no gaps.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::provider::ProviderIdentity;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const SCHEDULE: &str = "schedule";
pub const ENRICHED: &str = "enriched";
pub const TRANSCRIPT: &str = "transcript";
pub const ENV_STATES: &str = "env_states";
pub const EVENTS: &str = "events";
pub const STREAMS: [&str; 5] = [SCHEDULE, ENRICHED, TRANSCRIPT, ENV_STATES, EVENTS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Schedule,
    Enrichment,
    Prompt,
    Chat,
    Turn,
    StateDiff,
    Interview,
    Error,
    Clamp,
    Narrative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub payload: Value,
}

impl TraceEvent {
    pub fn new(seq: u64, kind: EventKind, payload: impl Serialize) -> Self {
        Self {
            seq,
            kind,
            payload: serde_json::to_value(payload).expect("trace payloads serialize"),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace events serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Durability {
    /// fsync after every append.
    #[default]
    Sync,
    /// Flush to the OS only.
    Flush,
}

/// Single writer for one stream file.
#[derive(Debug)]
pub struct StreamWriter {
    name: String,
    path: PathBuf,
    file: File,
    last_seq: u64,
    durability: Durability,
}

impl StreamWriter {
    /// Creates (or truncates) the stream file.
    pub fn create(path: &Path, name: impl Into<String>) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            name: name.into(),
            path: path.to_path_buf(),
            file,
            last_seq: 0,
            durability: Durability::default(),
        })
    }

    /// Reopens an existing stream for appending after verifying it.
    pub fn open_append(path: &Path, name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        let events = read_stream(path, &name)?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            name,
            path: path.to_path_buf(),
            file,
            last_seq: events.last().map_or(0, |e| e.seq),
            durability: Durability::default(),
        })
    }

    pub fn with_durability(mut self, durability: Durability) -> Self {
        self.durability = durability;
        self
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Appends one event; `event.seq` must be exactly `last_seq + 1`.
    pub fn append(&mut self, event: &TraceEvent) -> Result<u64> {
        if event.seq != self.last_seq + 1 {
            return Err(Error::Sequence {
                stream: self.name.clone(),
                expected: self.last_seq + 1,
                got: event.seq,
            });
        }
        let mut line = event.to_line();
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        if self.durability == Durability::Sync {
            self.file
                .sync_data()
                .map_err(|e| Error::io(&self.path, e))?;
        }
        self.last_seq = event.seq;
        Ok(event.seq)
    }
}

/// Reads a stream, checking that sequence numbers run 1, 2, 3, ...
pub fn read_stream(path: &Path, name: &str) -> Result<Vec<TraceEvent>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let expected = i as u64 + 1;
        let event: TraceEvent = serde_json::from_str(&line).map_err(|e| Error::Integrity {
            stream: name.into(),
            seq: Some(expected),
            reason: format!("unparseable line {}: {e}", i + 1),
        })?;
        if event.seq != expected {
            return Err(Error::Integrity {
                stream: name.into(),
                seq: Some(expected),
                reason: format!("expected seq {expected}, found {}", event.seq),
            });
        }
        out.push(event);
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectStatus {
    Complete,
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub status: SubjectStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Event count per stream.
    pub streams: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub study_id: String,
    /// SHA-256 of `config.json`.
    pub config_hash: String,
    pub seed: u64,
    /// Identities keyed by role; key names only, never key values.
    pub providers: BTreeMap<String, ProviderIdentity>,
    pub engine_version: String,
    pub rng_algorithm: String,
    pub subjects: BTreeMap<String, SubjectEntry>,
}

impl RunManifest {
    pub fn status_counts(&self) -> BTreeMap<SubjectStatus, usize> {
        let mut out = BTreeMap::new();
        for s in self.subjects.values() {
            *out.entry(s.status).or_insert(0) += 1;
        }
        out
    }
}

/// Writes pretty JSON plus a trailing newline and syncs it.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifacts serialize");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub config_text: String,
    /// Streams keyed by subject id, then stream name.
    pub streams: BTreeMap<String, BTreeMap<String, Vec<TraceEvent>>>,
}

impl LoadedRun {
    pub fn stream(&self, subject: &str, name: &str) -> &[TraceEvent] {
        self.streams
            .get(subject)
            .and_then(|s| s.get(name))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn subject_dir(&self, subject: &str) -> PathBuf {
        self.dir.join(subject)
    }
}

/// Loads a run directory, verifying the config hash and every stream.
pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest: RunManifest =
        read_json(&dir.join(MANIFEST_FILE)).map_err(|e| Error::Integrity {
            stream: MANIFEST_FILE.into(),
            seq: None,
            reason: e.to_string(),
        })?;
    let config_path = dir.join(CONFIG_FILE);
    let config_text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let hash = sha256_hex(config_text.as_bytes());
    if hash != manifest.config_hash {
        return Err(Error::Integrity {
            stream: CONFIG_FILE.into(),
            seq: None,
            reason: format!(
                "config hash {hash} does not match manifest {}",
                manifest.config_hash
            ),
        });
    }
    let mut streams = BTreeMap::new();
    for (subject, entry) in &manifest.subjects {
        let mut subject_streams = BTreeMap::new();
        for (name, count) in &entry.streams {
            let label = format!("{subject}/{name}");
            let path = dir.join(subject).join(format!("{name}.jsonl"));
            if !path.exists() {
                return Err(Error::Integrity {
                    stream: label,
                    seq: None,
                    reason: "stream file missing".into(),
                });
            }
            let events = read_stream(&path, &label)?;
            if events.len() as u64 != *count {
                return Err(Error::Integrity {
                    stream: label,
                    seq: Some(events.len() as u64 + 1),
                    reason: format!("manifest lists {count} events, found {}", events.len()),
                });
            }
            subject_streams.insert(name.clone(), events);
        }
        streams.insert(subject.clone(), subject_streams);
    }
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest,
        config_text,
        streams,
    })
}
