//! Append-only verdict ledger.
//!
//! One verdict per line, tab separated:
//! `timestamp  iteration  object_id  verdict  reviewer`. Replay is a pure
//! function of the ledger bytes: the last verdict per object wins, and
//! Filter is terminal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Skip,
    Filter,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Accept => "accept",
            Verdict::Skip => "skip",
            Verdict::Filter => "filter",
        })
    }
}

impl FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "accept" => Ok(Verdict::Accept),
            "skip" => Ok(Verdict::Skip),
            "filter" => Ok(Verdict::Filter),
            other => Err(format!("unknown verdict {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub timestamp: String,
    pub iteration: u32,
    pub object_id: String,
    pub verdict: Verdict,
    pub reviewer: String,
}

impl LedgerEntry {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\n",
            self.timestamp, self.iteration, self.object_id, self.verdict, self.reviewer
        )
    }
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger i/o: {0}")]
    Io(#[from] io::Error),
    #[error("ledger line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown object {0:?}")]
    UnknownObject(String),
    #[error("object {object_id:?} is filtered; verdict {verdict} not allowed")]
    IllegalTransition { object_id: String, verdict: Verdict },
    #[error("field {0:?} may not contain tabs or newlines")]
    InvalidField(String),
}

pub fn parse_ledger(text: &str) -> Result<Vec<LedgerEntry>, LedgerError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| LedgerError::Parse {
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, got {}", fields.len())));
        }
        out.push(LedgerEntry {
            timestamp: fields[0].to_string(),
            iteration: fields[1]
                .parse()
                .map_err(|e| parse_err(format!("iteration: {e}")))?,
            object_id: fields[2].to_string(),
            verdict: fields[3].parse().map_err(parse_err)?,
            reviewer: fields[4].to_string(),
        });
    }
    Ok(out)
}

/// Final verdict per object.
pub fn replay(entries: &[LedgerEntry]) -> Result<BTreeMap<String, Verdict>, LedgerError> {
    let mut state = BTreeMap::new();
    for e in entries {
        if state.get(&e.object_id) == Some(&Verdict::Filter) {
            return Err(LedgerError::IllegalTransition {
                object_id: e.object_id.clone(),
                verdict: e.verdict,
            });
        }
        state.insert(e.object_id.clone(), e.verdict);
    }
    Ok(state)
}

/// Last verdict per object among entries of one iteration.
pub fn verdicts_for_iteration(entries: &[LedgerEntry], iteration: u32) -> BTreeMap<String, Verdict> {
    entries
        .iter()
        .filter(|e| e.iteration == iteration)
        .map(|e| (e.object_id.clone(), e.verdict))
        .collect()
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerEntry>, LedgerError> {
    match fs::read_to_string(path) {
        Ok(text) => parse_ledger(&text),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

fn check_field(s: &str) -> Result<(), LedgerError> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(LedgerError::InvalidField(s.to_string()));
    }
    Ok(())
}

/// Appends one verdict under an exclusive file lock after checking it
/// against the replayed ledger.
pub fn append_verdict(
    path: &Path,
    known: &BTreeSet<String>,
    entry: &LedgerEntry,
) -> Result<(), LedgerError> {
    for f in [&entry.timestamp, &entry.object_id, &entry.reviewer] {
        check_field(f)?;
    }
    if !known.contains(&entry.object_id) {
        return Err(LedgerError::UnknownObject(entry.object_id.clone()));
    }
    let mut file: File = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(path)?;
    file.lock()?;
    let result = (|| {
        let mut text = String::new();
        file.seek(SeekFrom::Start(0))?;
        file.read_to_string(&mut text)?;
        let state = replay(&parse_ledger(&text)?)?;
        if state.get(&entry.object_id) == Some(&Verdict::Filter) {
            return Err(LedgerError::IllegalTransition {
                object_id: entry.object_id.clone(),
                verdict: entry.verdict,
            });
        }
        if !text.is_empty() && !text.ends_with('\n') {
            file.write_all(b"\n")?;
        }
        file.write_all(entry.to_line().as_bytes())?;
        file.sync_data()?;
        Ok(())
    })();
    file.unlock()?;
    result
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub accepted: usize,
    pub skipped: usize,
    pub filtered: usize,
}

impl VerdictCounts {
    pub fn add(&mut self, v: Verdict) {
        match v {
            Verdict::Accept => self.accepted += 1,
            Verdict::Skip => self.skipped += 1,
            Verdict::Filter => self.filtered += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.accepted + self.skipped + self.filtered
    }

    /// Accept/skip/filter shares in percent, rounded to one decimal.
    pub fn percentages(&self) -> [f64; 3] {
        let t = self.total().max(1) as f64;
        [self.accepted, self.skipped, self.filtered].map(|c| (1000.0 * c as f64 / t).round() / 10.0)
    }

    pub fn accept_fraction(&self) -> f64 {
        self.accepted as f64 / self.total().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub per_iteration: BTreeMap<u32, VerdictCounts>,
    pub total: VerdictCounts,
}

pub fn summarize_ledger(entries: &[LedgerEntry]) -> Result<LedgerSummary, LedgerError> {
    let iterations: BTreeSet<u32> = entries.iter().map(|e| e.iteration).collect();
    let per_iteration = iterations
        .into_iter()
        .map(|it| {
            let mut c = VerdictCounts::default();
            verdicts_for_iteration(entries, it).into_values().for_each(|v| c.add(v));
            (it, c)
        })
        .collect();
    let mut total = VerdictCounts::default();
    replay(entries)?.into_values().for_each(|v| total.add(v));
    Ok(LedgerSummary {
        per_iteration,
        total,
    })
}
