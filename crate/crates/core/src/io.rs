//! JSON-lines file helpers with line-number error reporting.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed row: {source}")]
    MalformedRow {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("write to {path} failed: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
}

/// Read a JSONL file into a vector, reporting the 1-based line number of the
/// first malformed row.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = File::open(path).map_err(|source| IoError::Open {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| IoError::Open {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|source| IoError::MalformedRow {
            path: path.display().to_string(),
            line: idx + 1,
            source,
        })?;
        out.push(row);
    }
    Ok(out)
}

/// Write items as one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IoError> {
    let file = File::create(path).map_err(|source| IoError::Open {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("serializable item");
        writeln!(w, "{line}").map_err(|source| IoError::Write {
            path: path.display().to_string(),
            source,
        })?;
    }
    w.flush().map_err(|source| IoError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// Read a whole-file JSON value.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let file = File::open(path).map_err(|source| IoError::Open {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| IoError::MalformedRow {
        path: path.display().to_string(),
        line: 0,
        source,
    })
}

/// Write a value as pretty-printed JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let file = File::create(path).map_err(|source| IoError::Open {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| IoError::MalformedRow {
        path: path.display().to_string(),
        line: 0,
        source,
    })?;
    writeln!(w).ok();
    w.flush().map_err(|source| IoError::Write {
        path: path.display().to_string(),
        source,
    })
}
