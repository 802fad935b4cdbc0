//! JSON Lines object manifests.
//!
//! One object per line:
//! `{"id": "...", "surface": "a.fpc", "camera": "a.json", "category_hint": "...",
//! "embedding": "a.emb.json", "status": "pending"}`. Only `id` and `surface`
//! are required; relative paths resolve against the manifest's directory.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Accepted,
    Skipped,
    Filtered,
}

impl Status {
    pub fn parse(s: &str) -> Option<Status> {
        match s {
            "pending" => Some(Status::Pending),
            "accepted" => Some(Status::Accepted),
            "skipped" => Some(Status::Skipped),
            "filtered" => Some(Status::Filtered),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: String,
    pub surface: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_hint: Option<String>,
    /// JSON array of per-frame feature vectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<PathBuf>,
    pub status: Status,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate object id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: unknown status {status:?}")]
    UnknownStatus { line: usize, status: String },
    #[error("object {id:?}: missing file {path}")]
    MissingFile { id: String, path: String },
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    surface: PathBuf,
    camera: Option<PathBuf>,
    category_hint: Option<String>,
    embedding: Option<PathBuf>,
    status: Option<String>,
}

/// Parses manifest text without touching the file system.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ObjectRecord>, ManifestError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw_line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(trimmed).map_err(|e| ManifestError::Parse {
            line,
            message: e.to_string(),
        })?;
        let status = match raw.status.as_deref() {
            None => Status::Pending,
            Some(s) => Status::parse(s).ok_or_else(|| ManifestError::UnknownStatus {
                line,
                status: s.to_string(),
            })?,
        };
        if !seen.insert(raw.id.clone()) {
            return Err(ManifestError::DuplicateId { line, id: raw.id });
        }
        out.push(ObjectRecord {
            id: raw.id,
            surface: base.join(raw.surface),
            camera: raw.camera.map(|p| base.join(p)),
            category_hint: raw.category_hint,
            embedding: raw.embedding.map(|p| base.join(p)),
            status,
        });
    }
    Ok(out)
}

/// Loads and validates a manifest, checking that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Vec<ObjectRecord>, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let records = parse_manifest(&text, base)?;
    for r in &records {
        let paths = std::iter::once(&r.surface)
            .chain(r.camera.as_ref())
            .chain(r.embedding.as_ref());
        for p in paths {
            if !p.is_file() {
                return Err(ManifestError::MissingFile {
                    id: r.id.clone(),
                    path: p.display().to_string(),
                });
            }
        }
    }
    Ok(records)
}

/// Serializes records as JSON Lines, paths as given.
pub fn render_manifest(records: &[ObjectRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serializable record"));
        out.push('\n');
    }
    out
}
