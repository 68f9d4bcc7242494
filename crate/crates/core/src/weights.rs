//! The `MCCW1` flat binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MCCW1"
//! u32                      record count
//! repeated per record:
//!   u32 + [u8]             tag, length-prefixed UTF-8
//!   u8                     dtype code (0 = f32, 1 = u8, 2 = u64)
//!   u32 + [u64]            rank, then that many dimensions
//!   [dtype]                raw values, product(dims) of them
//! ```
//!
//! Encoder weights, decoder/MCC checkpoints and trainer state all use it.
//! The `u8` and `u64` codes carry checkpoint metadata (config text, step
//! counters); network parameters are always `f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MCCW1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::U8(_) => 1,
            TensorData::U64(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub tag: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

/// Ordered collection of uniquely tagged tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    records: Vec<Record>,
}

impl WeightFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn push(&mut self, tag: impl Into<String>, shape: Vec<usize>, data: TensorData) {
        let tag = tag.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "record `{tag}`: shape does not match value count"
        );
        assert!(self.get(&tag).is_none(), "duplicate record `{tag}`");
        self.records.push(Record { tag, shape, data });
    }

    pub fn push_f32(&mut self, tag: impl Into<String>, shape: &[usize], values: Vec<f32>) {
        self.push(tag, shape.to_vec(), TensorData::F32(values));
    }

    pub fn push_bytes(&mut self, tag: impl Into<String>, bytes: Vec<u8>) {
        let n = bytes.len();
        self.push(tag, vec![n], TensorData::U8(bytes));
    }

    pub fn push_u64(&mut self, tag: impl Into<String>, values: Vec<u64>) {
        let n = values.len();
        self.push(tag, vec![n], TensorData::U64(values));
    }

    pub fn get(&self, tag: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.tag == tag)
    }

    fn require(&self, tag: &str) -> Result<&Record> {
        self.get(tag)
            .ok_or_else(|| Error::MissingLayer(tag.to_string()))
    }

    /// The `f32` values of `tag`, which must have exactly `shape`.
    pub fn f32(&self, tag: &str, shape: &[usize]) -> Result<&[f32]> {
        let rec = self.require(tag)?;
        if rec.shape != shape {
            return Err(Error::ShapeMismatch {
                tag: tag.to_string(),
                expected: shape.to_vec(),
                found: rec.shape.clone(),
            });
        }
        match &rec.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(Error::WeightFormat(format!("`{tag}` is not f32"))),
        }
    }

    pub fn bytes(&self, tag: &str) -> Result<&[u8]> {
        match &self.require(tag)?.data {
            TensorData::U8(v) => Ok(v),
            _ => Err(Error::WeightFormat(format!("`{tag}` is not u8"))),
        }
    }

    pub fn u64s(&self, tag: &str) -> Result<&[u64]> {
        match &self.require(tag)?.data {
            TensorData::U64(v) => Ok(v),
            _ => Err(Error::WeightFormat(format!("`{tag}` is not u64"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for rec in &self.records {
            out.extend_from_slice(&(rec.tag.len() as u32).to_le_bytes());
            out.extend_from_slice(rec.tag.as_bytes());
            out.push(rec.data.code());
            out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
            for &d in &rec.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &rec.data {
                TensorData::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
                TensorData::U64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r
            .take(MAGIC.len())
            .ok_or_else(|| Error::WeightFormat("file shorter than magic".into()))?;
        if magic != MAGIC {
            return Err(Error::WeightFormat("bad magic, expected MCCW1".into()));
        }
        let count = r
            .u32()
            .ok_or_else(|| Error::WeightFormat("missing record count".into()))?;
        let mut file = WeightFile::new();
        for i in 0..count {
            let anon = || Error::IncompleteLayer(format!("#{i}"));
            let tag_len = r.u32().ok_or_else(anon)? as usize;
            let tag = String::from_utf8(r.take(tag_len).ok_or_else(anon)?.to_vec())
                .map_err(|_| Error::WeightFormat(format!("record #{i}: tag is not UTF-8")))?;
            let incomplete = || Error::IncompleteLayer(tag.clone());
            let code = r.take(1).ok_or_else(incomplete)?[0];
            let rank = r.u32().ok_or_else(incomplete)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(incomplete)? as usize);
            }
            let n: usize = shape.iter().product();
            let data = match code {
                0 => TensorData::F32(
                    r.take(n * 4)
                        .ok_or_else(incomplete)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => TensorData::U8(r.take(n).ok_or_else(incomplete)?.to_vec()),
                2 => TensorData::U64(
                    r.take(n * 8)
                        .ok_or_else(incomplete)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => {
                    return Err(Error::WeightFormat(format!(
                        "`{tag}`: unknown dtype code {other}"
                    )))
                }
            };
            if file.get(&tag).is_some() {
                return Err(Error::WeightFormat(format!("duplicate record `{tag}`")));
            }
            file.records.push(Record { tag, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::WeightFormat(format!(
                "{} trailing bytes after last record",
                bytes.len() - r.pos
            )));
        }
        Ok(file)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Writes through a temporary sibling and renames, so readers never see
    /// a half-written file.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
