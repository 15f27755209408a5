//! Binary checkpoint format.
//!
//! Layout, all integers little-endian u32, all floats little-endian f32:
//!
//! ```text
//! magic "AUTOSIZE1" (9 bytes)
//! header_len, header bytes        (the model config's canonical text)
//! repeated until end of file:
//!   name_len, name bytes (UTF-8)
//!   rank, dims[rank]
//!   values[product(dims)]
//! ```
//!
//! Records are written sorted by name, so equal models produce equal files.
//! Every structural defect (bad magic, truncation, duplicate or unknown
//! names, shape mismatches) surfaces as a format error.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameter, TransformerModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 9] = b"AUTOSIZE1";

/// One named tensor in a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Serialize records under a header. Records are sorted by name; names must
/// be unique and non-empty.
pub fn write_records(path: &Path, header: &str, records: &[Record]) -> Result<()> {
    let mut sorted: Vec<&Record> = records.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    for pair in sorted.windows(2) {
        if pair[0].name == pair[1].name {
            return Err(Error::InvalidInput(format!(
                "duplicate record name {}",
                pair[0].name
            )));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, header.len())?;
    buf.extend_from_slice(header.as_bytes());
    for r in sorted {
        if r.name.is_empty() {
            return Err(Error::InvalidInput(
                "record name must not be empty".to_string(),
            ));
        }
        let numel: usize = r.shape.iter().product();
        if r.shape.is_empty() || r.shape.contains(&0) || numel != r.values.len() {
            return Err(Error::InvalidInput(format!(
                "record {} has shape {:?} but {} values",
                r.name,
                r.shape,
                r.values.len()
            )));
        }
        push_u32(&mut buf, r.name.len())?;
        buf.extend_from_slice(r.name.as_bytes());
        push_u32(&mut buf, r.shape.len())?;
        for &d in &r.shape {
            push_u32(&mut buf, d)?;
        }
        for &v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Parse a checkpoint file into its header text and records.
pub fn read_records(path: &Path) -> Result<(String, Vec<Record>)> {
    let buf = fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let magic = cur.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(MAGIC),
            String::from_utf8_lossy(magic)
        )));
    }
    let header_len = cur.take_u32("header length")?;
    let header = std::str::from_utf8(cur.take(header_len, "header")?)
        .map_err(|_| Error::Format("header is not UTF-8".to_string()))?
        .to_string();
    let mut records = Vec::new();
    while !cur.done() {
        let name_len = cur.take_u32("record name length")?;
        if name_len == 0 {
            return Err(Error::Format("record name must not be empty".to_string()));
        }
        let name = std::str::from_utf8(cur.take(name_len, "record name")?)
            .map_err(|_| Error::Format("record name is not UTF-8".to_string()))?
            .to_string();
        let rank = cur.take_u32("record rank")?;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!(
                "record {name} has implausible rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = cur.take_u32("record dim")?;
            if d == 0 {
                return Err(Error::Format(format!("record {name} has a zero dimension")));
            }
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("record {name} shape overflows")))?;
            shape.push(d);
        }
        let byte_len = numel
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("record {name} shape overflows")))?;
        let raw = cur.take(byte_len, &format!("values of {name}"))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(Record {
            name,
            shape,
            values,
        });
    }
    Ok((header, records))
}

/// Write a model's config and parameters as one checkpoint.
pub fn save_model(model: &TransformerModel<f32>, path: &Path) -> Result<()> {
    let records: Vec<Record> = model
        .params()
        .iter()
        .map(|p| Record {
            name: p.id.clone(),
            shape: p.value.shape().to_vec(),
            values: p.value.data().to_vec(),
        })
        .collect();
    write_records(path, &model.config().canonical_text(), &records)
}

/// Rebuild a model from a checkpoint, validating the parameter set against
/// the embedded config.
pub fn load_model(path: &Path) -> Result<TransformerModel<f32>> {
    let (header, records) = read_records(path)?;
    let config = ModelConfig::from_canonical_text(&header)?;
    let params = records
        .into_iter()
        .map(|r| {
            Ok(Parameter {
                id: r.name,
                value: Tensor::new(r.shape, r.values).map_err(|e| Error::Format(e.to_string()))?,
                auto_sized: false,
            })
        })
        .collect::<Result<Vec<Parameter<f32>>>>()?;
    TransformerModel::from_parts(config, params)
}

fn push_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::InvalidInput(format!("length {v} exceeds the u32 field")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated file: wanted {n} bytes for {what}, {} left",
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model() -> TransformerModel<f32> {
        TransformerModel::init(ModelConfig::uniform(1, 1, 8, 2, 16, 11, 12, 0.0), 42).unwrap()
    }

    #[test]
    fn single_record_file_has_frozen_byte_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        let rec = Record {
            name: "a.b".to_string(),
            shape: vec![2, 1],
            values: vec![1.0, -2.0],
        };
        write_records(&path, "x=1\n", &[rec]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut want: Vec<u8> = Vec::new();
        want.extend_from_slice(b"AUTOSIZE1");
        want.extend_from_slice(&[4, 0, 0, 0]);
        want.extend_from_slice(b"x=1\n");
        want.extend_from_slice(&[3, 0, 0, 0]);
        want.extend_from_slice(b"a.b");
        want.extend_from_slice(&[2, 0, 0, 0]);
        want.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0]);
        want.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f]);
        want.extend_from_slice(&[0x00, 0x00, 0x00, 0xc0]);
        assert_eq!(bytes, want);
    }

    #[test]
    fn records_roundtrip_and_come_back_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.bin");
        let recs = vec![
            Record {
                name: "zz".to_string(),
                shape: vec![2],
                values: vec![5.0, 6.0],
            },
            Record {
                name: "aa".to_string(),
                shape: vec![1, 2],
                values: vec![-1.5, 0.25],
            },
        ];
        write_records(&path, "h\n", &recs).unwrap();
        let (header, back) = read_records(&path).unwrap();
        assert_eq!(header, "h\n");
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].name, "aa");
        assert_eq!(back[1].name, "zz");
        assert_eq!(back[0].values, vec![-1.5, 0.25]);
    }

    #[test]
    fn duplicate_record_names_are_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let rec = Record {
            name: "p".to_string(),
            shape: vec![1],
            values: vec![0.0],
        };
        let err = write_records(&path, "", &[rec.clone(), rec]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let model = tiny_model();
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.params().len(), model.params().len());
        for p in model.params() {
            let q = back.param(&p.id).unwrap();
            assert_eq!(q.auto_sized, p.auto_sized, "{}", p.id);
            for (&a, &b) in p.value.data().iter().zip(q.value.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{}", p.id);
            }
        }
    }

    #[test]
    fn save_load_save_produces_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let model = tiny_model();
        save_model(&model, &a).unwrap();
        save_model(&load_model(&a).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        save_model(&tiny_model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.bin");
        save_model(&tiny_model(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [bytes.len() - 3, bytes.len() / 2, 20, 5] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(
                matches!(load_model(&path), Err(Error::Format(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn header_not_matching_any_config_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.bin");
        write_records(&path, "not a config\n", &[]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format(_))));
    }

    #[test]
    fn missing_or_extra_parameters_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let model = tiny_model();
        let mut records: Vec<Record> = model
            .params()
            .iter()
            .map(|p| Record {
                name: p.id.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().to_vec(),
            })
            .collect();
        let dropped = records.pop().unwrap();
        write_records(&path, &model.config().canonical_text(), &records).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format(_))));

        records.push(dropped);
        records.push(Record {
            name: "mystery".to_string(),
            shape: vec![1],
            values: vec![0.0],
        });
        write_records(&path, &model.config().canonical_text(), &records).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format(_))));
    }
}
