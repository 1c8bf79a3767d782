//! JSON-lines persistence for [`PreferenceDataset`].
//!
//! Line 1 is a header, every further line one record:
//!
//! ```text
//! {"kind":"header","schema_version":1,"provenance":{...}}
//! {"kind":"pair","prompt":{...},"winner":{...},"loser":{...},"loser_violations":[...]}
//! {"kind":"unpaired","prompt":{...},"undesirable":{...},"violations":[...]}
//! ```
//!
//! Pairs are written before unpaired samples, each group in dataset order.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prefs::{PreferenceDataset, PreferencePair, Provenance, UnpairedSample};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset i/o: {0}")]
    Io(#[from] io::Error),
    #[error("schema version {found} is not supported (expected {SCHEMA_VERSION})")]
    SchemaVersionMismatch { found: u64 },
    #[error("line {line}: {reason}")]
    CorruptRecord { line: usize, reason: String },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header {
        schema_version: u32,
        provenance: Provenance,
    },
    Pair(PreferencePair),
    Unpaired(UnpairedSample),
}

pub fn to_string(ds: &PreferenceDataset) -> String {
    let mut out = String::new();
    let mut push = |record: &Record| {
        out.push_str(&serde_json::to_string(record).expect("records serialize"));
        out.push('\n');
    };
    push(&Record::Header {
        schema_version: SCHEMA_VERSION,
        provenance: ds.provenance.clone(),
    });
    for p in &ds.paired {
        push(&Record::Pair(p.clone()));
    }
    for u in &ds.unpaired {
        push(&Record::Unpaired(u.clone()));
    }
    out
}

pub fn write_dataset(ds: &PreferenceDataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    fs::write(path, to_string(ds))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<PreferenceDataset, DatasetError> {
    from_str(&fs::read_to_string(path)?)
}

pub fn from_str(text: &str) -> Result<PreferenceDataset, DatasetError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or(DatasetError::CorruptRecord {
        line: 1,
        reason: "missing header".into(),
    })?;
    let value: serde_json::Value =
        serde_json::from_str(header).map_err(|e| DatasetError::CorruptRecord {
            line: 1,
            reason: e.to_string(),
        })?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(found) => return Err(DatasetError::SchemaVersionMismatch { found }),
        None => {
            return Err(DatasetError::CorruptRecord {
                line: 1,
                reason: "header lacks schema_version".into(),
            })
        }
    }
    let provenance = match serde_json::from_value(value) {
        Ok(Record::Header { provenance, .. }) => provenance,
        Ok(_) => {
            return Err(DatasetError::CorruptRecord {
                line: 1,
                reason: "first record is not a header".into(),
            })
        }
        Err(e) => {
            return Err(DatasetError::CorruptRecord {
                line: 1,
                reason: e.to_string(),
            })
        }
    };

    let mut ds = PreferenceDataset {
        paired: Vec::new(),
        unpaired: Vec::new(),
        provenance,
    };
    for (line, text) in lines {
        if text.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(text) {
            Ok(Record::Pair(p)) => ds.paired.push(p),
            Ok(Record::Unpaired(u)) => ds.unpaired.push(u),
            Ok(Record::Header { .. }) => {
                return Err(DatasetError::CorruptRecord {
                    line,
                    reason: "second header".into(),
                });
            }
            Err(e) => {
                return Err(DatasetError::CorruptRecord {
                    line,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(ds)
}
