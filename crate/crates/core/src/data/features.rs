//! `ICFR` feature files: magic, version, entry count, then per entry a
//! length-prefixed UTF-8 id, rows, cols and row-major little-endian f32 data.

use std::collections::BTreeSet;
use std::path::Path;

use super::{read_file, write_file, DataError};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"ICFR";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEntry {
    pub id: String,
    pub matrix: Tensor<f32>,
}

impl FeatureEntry {
    pub fn new(id: impl Into<String>, matrix: Tensor<f32>) -> Self {
        Self {
            id: id.into(),
            matrix,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<(), DataError> {
    let v = u32::try_from(v).map_err(|_| DataError::Invalid(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes entries in the given order.
pub fn encode_features(entries: &[FeatureEntry]) -> Result<Vec<u8>, DataError> {
    let mut seen = BTreeSet::new();
    let payload: usize = entries.iter().map(|e| 12 + e.id.len() + 4 * e.matrix.numel()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FEATURE_VERSION as usize, "version")?;
    put_u32(&mut out, entries.len(), "entry count")?;
    for e in entries {
        if !seen.insert(e.id.as_str()) {
            return Err(DataError::DuplicateId(e.id.clone()));
        }
        if !e.matrix.is_finite() {
            return Err(DataError::NonFinite(e.id.clone()));
        }
        let (rows, cols) = match e.matrix.shape() {
            [r, c] => (*r, *c),
            other => {
                return Err(DataError::Invalid(format!(
                    "features for {} have rank {}, expected 2",
                    e.id,
                    other.len()
                )))
            }
        };
        put_u32(&mut out, e.id.len(), "id length")?;
        out.extend_from_slice(e.id.as_bytes());
        put_u32(&mut out, rows, "rows")?;
        put_u32(&mut out, cols, "cols")?;
        for v in e.matrix.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], DataError> {
        if self.bytes.len() < n {
            return Err(DataError::Truncated(what));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize, DataError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")) as usize)
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<FeatureEntry>, DataError> {
    let mut c = Cursor { bytes };
    if c.take(4, "magic")? != FEATURE_MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = c.u32("version")? as u32;
    if version != FEATURE_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let count = c.u32("entry count")?;
    let mut seen = BTreeSet::new();
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = c.u32("id length")?;
        let id = std::str::from_utf8(c.take(n, "id")?)
            .map_err(|_| DataError::Invalid("image id is not UTF-8".into()))?
            .to_string();
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateId(id));
        }
        let rows = c.u32("rows")?;
        let cols = c.u32("cols")?;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| DataError::Invalid(format!("{id}: {rows}×{cols} overflows")))?;
        let data: Vec<f32> = c
            .take(len, "feature data")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
            .collect();
        let matrix = Tensor::new(vec![rows, cols], data).expect("length checked");
        entries.push(FeatureEntry { id, matrix });
    }
    if !c.bytes.is_empty() {
        return Err(DataError::TrailingBytes(c.bytes.len()));
    }
    Ok(entries)
}

pub fn write_features(path: &Path, entries: &[FeatureEntry]) -> Result<(), DataError> {
    write_file(path, &encode_features(entries)?)
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureEntry>, DataError> {
    decode_features(&read_file(path)?)
}
