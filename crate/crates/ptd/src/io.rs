//! JSON Lines corpora, slot tables and generation files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ptd_core::corpus::{Dialogue, SlotTable};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulated futures of one decision sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub sample_id: String,
    pub r_u: Vec<String>,
    pub r_a: Vec<String>,
    pub logp_u: f64,
    pub logp_a: f64,
}

/// Reads one JSON value per non-blank line; errors carry the line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|source| Error::Read {
        path: path.into(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| Error::Read {
            path: path.into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e))?);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item).expect("serializable record"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_file(path, to_jsonl(items).as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let err = |source| Error::Write {
        path: path.into(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(err)?);
    w.write_all(bytes).map_err(err)?;
    w.flush().map_err(err)
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Read {
        path: path.into(),
        source,
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Dialogue>> {
    read_jsonl(path)
}

pub fn write_corpus(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    write_jsonl(path, dialogues)
}

/// A JSON object mapping surface values to placeholders.
pub fn read_slots(path: &Path) -> Result<SlotTable> {
    read_json(path)
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Write {
        path: path.into(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_report_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(&p, "{\"dialogue_id\":\"a\"}\n\n{\"dialogue_id\":\n").unwrap();
        let e = read_corpus(&p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let d: Dialogue = serde_json::from_str(r#"{"dialogue_id":"x","split":"test","turns":[{"speaker":"agent","sentences":["Hi."]}]}"#).unwrap();
        write_corpus(&p, std::slice::from_ref(&d)).unwrap();
        assert_eq!(read_corpus(&p).unwrap(), vec![d]);
    }

    #[test]
    fn slot_table_from_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        fs::write(&p, r#"{"pizza hut": "[restaurant_name]"}"#).unwrap();
        assert_eq!(read_slots(&p).unwrap().len(), 1);
        fs::write(&p, r#"{"pizza hut": "not a placeholder"}"#).unwrap();
        assert!(read_slots(&p).is_err());
    }
}
