//! File plumbing: config loading, artifact writing, manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use nudge_core::events::{event_to_line, parse_event_log, EventRecord};
use nudge_core::util::sha256_hex;

use crate::error::CliError;

/// Parses a JSON config, reporting the path of the offending field.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(path, e.to_string()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        if field == "." {
            CliError::config(path, inner.to_string())
        } else {
            CliError::config(path, format!("field `{field}`: {inner}"))
        }
    })
}

pub fn read_events(path: &Path) -> Result<Vec<EventRecord>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_event_log(BufReader::new(file)).map_err(|e| CliError::Input { path: path.to_path_buf(), message: e.to_string() })
}

pub fn events_jsonl(events: &[EventRecord]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&event_to_line(e));
        out.push('\n');
    }
    out
}

pub fn json_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize") + "\n"
}

/// Writes via a temporary sibling so a crash never leaves a half-written file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_paths: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub output_dir: String,
    pub artifacts: Vec<Artifact>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

impl RunManifest {
    pub fn new(command: &str, output_dir: &Path, started_at: String) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_paths: Vec::new(),
            seeds: BTreeMap::new(),
            output_dir: output_dir.display().to_string(),
            artifacts: Vec::new(),
            started_at,
            finished_at: String::new(),
        }
    }

    pub fn file_name(command: &str) -> String {
        format!("{command}_manifest.json")
    }

    /// Checksums `files` (relative to the output directory) and writes the manifest.
    pub fn finish(mut self, files: &[PathBuf]) -> Result<PathBuf, CliError> {
        let dir = PathBuf::from(&self.output_dir);
        for file in files {
            let bytes = fs::read(file).map_err(|e| CliError::io(file, e))?;
            let name = file.strip_prefix(&dir).unwrap_or(file).display().to_string();
            self.artifacts.push(Artifact { file: name, sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
        }
        self.finished_at = now();
        let path = dir.join(Self::file_name(&self.command));
        write_atomic(&path, json_pretty(&self).as_bytes())?;
        Ok(path)
    }
}
