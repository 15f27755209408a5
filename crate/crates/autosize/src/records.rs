//! Line-oriented record files: one record per line, space-separated
//! `key=value` pairs, keys stable and written in sorted order. History,
//! trial tables, and sizing reports all use this shape so they can be
//! diffed, grepped, and replayed.
//!
//! Values must not contain whitespace or `=`; numbers print through Rust's
//! shortest-roundtrip formatting, so reading a value back yields the same
//! bits.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub type Record = BTreeMap<String, String>;

/// Fields that legitimately differ between a run and its replay.
pub const VOLATILE_KEYS: [&str; 3] = ["seconds", "cumulative_seconds", "created_unix"];

pub fn record(pairs: &[(&str, String)]) -> Record {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

fn check_key(key: &str) -> Result<()> {
    if key.is_empty()
        || !key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
    {
        return Err(Error::Format(format!("bad record key {key:?}")));
    }
    Ok(())
}

fn check_value(value: &str) -> Result<()> {
    if value.is_empty() || value.chars().any(|c| c.is_whitespace() || c == '=') {
        return Err(Error::Format(format!("bad record value {value:?}")));
    }
    Ok(())
}

pub fn format_record(record: &Record) -> Result<String> {
    let mut parts = Vec::with_capacity(record.len());
    for (key, value) in record {
        check_key(key)?;
        check_value(value)?;
        parts.push(format!("{key}={value}"));
    }
    Ok(parts.join(" "))
}

pub fn parse_record(line: &str) -> Result<Record> {
    let mut out = Record::new();
    for part in line.split_whitespace() {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("expected key=value, got {part:?}")))?;
        check_key(key)?;
        check_value(value)?;
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Format(format!("duplicate key {key:?} in record")));
        }
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut text = String::new();
    for record in records {
        text.push_str(&format_record(record)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|line| !line.trim().is_empty())
        .map(parse_record)
        .collect()
}

/// Copy of the records with wall-clock fields removed, for replay
/// comparison.
pub fn strip_volatile(records: &[Record]) -> Vec<Record> {
    records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            for key in VOLATILE_KEYS {
                r.remove(key);
            }
            r
        })
        .collect()
}

/// Shortest f64 text that parses back to the same bits.
pub fn float_field(value: f64) -> String {
    format!("{value}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_records_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.records");
        let records = vec![
            record(&[("epoch", "0".to_string()), ("dev_loss", float_field(2.5))]),
            record(&[
                ("epoch", "1".to_string()),
                ("dev_loss", float_field(0.1 + 0.2)),
            ]),
        ];
        write_records(&path, &records).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back, records);
        let reparsed: f64 = back[1]["dev_loss"].parse().unwrap();
        assert_eq!(reparsed.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn keys_are_written_in_sorted_order() {
        let r = record(&[("zeta", "1".to_string()), ("alpha", "2".to_string())]);
        assert_eq!(format_record(&r).unwrap(), "alpha=2 zeta=1");
    }

    #[test]
    fn malformed_lines_are_format_errors() {
        for line in ["novalue", "a=1 a=2", "=x", "bad key=1"] {
            assert!(
                matches!(parse_record(line), Err(Error::Format(_))),
                "{line}"
            );
        }
    }

    #[test]
    fn values_with_spaces_or_equals_are_rejected_on_write() {
        for value in ["a b", "a=b", ""] {
            let r = record(&[("k", value.to_string())]);
            assert!(
                matches!(format_record(&r), Err(Error::Format(_))),
                "{value:?}"
            );
        }
    }

    #[test]
    fn empty_and_blank_lines_are_skipped_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sparse.records");
        std::fs::write(&path, "a=1\n\n  \nb=2\n").unwrap();
        let records = read_records(&path).unwrap();
        assert_eq!(records.len(), 2);
    }

    #[test]
    fn volatile_fields_are_stripped_for_replay() {
        let r = record(&[
            ("trial", "0".to_string()),
            ("seconds", "1.25".to_string()),
            ("cumulative_seconds", "4.5".to_string()),
            ("dev_ppl", "1.5".to_string()),
        ]);
        let stripped = strip_volatile(&[r]);
        assert_eq!(stripped[0].len(), 2);
        assert!(stripped[0].contains_key("trial") && stripped[0].contains_key("dev_ppl"));
    }
}
