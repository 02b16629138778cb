//! Binary checkpoints: `ICKP`, version, length-prefixed JSON header, then
//! named little-endian f32 tensors until end of file.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ArchitectureConfig;
use super::params::ModelParams;
use super::{Captioner, ModelError};
use crate::tensor::{Scalar, Tensor};
use crate::text::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ICKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    architecture: ArchitectureConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vocabulary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: ArchitectureConfig,
    pub vocab: Option<Vocabulary>,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    pub fn captioner<F: Scalar>(&self) -> Result<Captioner<F>, ModelError> {
        Captioner::from_parts(self.architecture.clone(), self.params.cast())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.architecture, self.vocab.as_ref(), &self.params)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path)?;
        read_checkpoint(&mut bytes.as_slice())
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_len(w: &mut impl Write, n: usize) -> Result<(), ModelError> {
    let v = u32::try_from(n).map_err(|_| ModelError::Checkpoint(format!("length {n} exceeds u32")))?;
    Ok(put_u32(w, v)?)
}

/// Serializes parameters in name order, narrowing to f32.
pub fn write_checkpoint<F: Scalar>(
    w: &mut impl Write,
    architecture: &ArchitectureConfig,
    vocab: Option<&Vocabulary>,
    params: &ModelParams<F>,
) -> Result<(), ModelError> {
    let header = Header {
        architecture: architecture.clone(),
        vocab: vocab.cloned(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_len(w, json.len())?;
    w.write_all(&json)?;
    for (name, t) in params.iter() {
        put_len(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_len(w, t.rank())?;
        for &d in t.shape() {
            put_len(w, d)?;
        }
        let mut bytes = Vec::with_capacity(4 * t.numel());
        for &v in t.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn truncated(what: &str) -> ModelError {
    ModelError::Checkpoint(format!("truncated while reading {what}"))
}

fn take<'a>(r: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8], ModelError> {
    if r.len() < n {
        return Err(truncated(what));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn get_u32(r: &mut &[u8], what: &str) -> Result<u32, ModelError> {
    let b = take(r, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
}

/// Parses and validates a checkpoint against its own architecture header.
pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint, ModelError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut r = bytes.as_slice();
    if take(&mut r, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = get_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = get_u32(&mut r, "header length")? as usize;
    let header: Header = serde_json::from_slice(take(&mut r, len, "header")?)
        .map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    header.architecture.validate()?;
    let mut tensors = BTreeMap::new();
    while !r.is_empty() {
        let n = get_u32(&mut r, "name length")? as usize;
        let name = std::str::from_utf8(take(&mut r, n, "name")?)
            .map_err(|_| ModelError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = get_u32(&mut r, "rank")? as usize;
        let shape = (0..rank)
            .map(|_| get_u32(&mut r, "dims").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| ModelError::Checkpoint(format!("{name}: size overflow")))?;
        let data: Vec<f32> = take(&mut r, numel, "tensor data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(ModelError::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    let params = ModelParams::from_map(tensors);
    params.validate(&header.architecture)?;
    Ok(Checkpoint {
        architecture: header.architecture,
        vocab: header.vocab,
        params,
    })
}
