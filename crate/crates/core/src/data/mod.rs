//! Feature files, caption datasets, synthetic data, run configuration and
//! JSON reports.

mod config;
mod features;
mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ArchitectureSpec, RunConfig, OUTPUT_ROOT_ENV};
pub use features::{
    decode_features, encode_features, read_features, write_features, FeatureEntry, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use synthetic::{gen_synthetic, write_synthetic, SyntheticConfig, SyntheticData, SLOT_NAMES};

use crate::tensor::Tensor;

pub const CAPTIONS_PER_IMAGE: usize = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("not a feature file (bad magic)")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u32),
    #[error("feature file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} unexpected bytes after the last entry")]
    TrailingBytes(usize),
    #[error("duplicate image id {0}")]
    DuplicateId(String),
    #[error("non-finite feature values for {0}")]
    NonFinite(String),
    #[error("images without exactly {expected} captions: {ids:?}")]
    CaptionCount { expected: String, ids: Vec<String> },
    #[error("feature stream {stream} lacks images: {ids:?}")]
    MissingFeatures { stream: usize, ids: Vec<String> },
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    pub fn is_io(&self) -> bool {
        matches!(self, DataError::Io { .. })
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `bytes`, creating parent directories.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}

/// Pretty JSON with struct field order and sorted map keys. Reals use the
/// shortest representation that parses back to the same bits.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// One compact JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let mut text = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DataError> {
    let bytes = read_file(path)?;
    let text = String::from_utf8_lossy(&bytes);
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| DataError::Json {
                path: path.to_path_buf(),
                source,
            })
        })
        .collect()
}

/// `{"images": {"<id>": ["c1", ..., "c5"]}}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionsFile {
    pub images: BTreeMap<String, Vec<String>>,
}

/// Captions per image plus one feature map per stream, fully cross-checked.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionDataset {
    pub captions: BTreeMap<String, Vec<String>>,
    pub streams: Vec<BTreeMap<String, Tensor<f32>>>,
}

impl CaptionDataset {
    /// Checks caption counts (exactly five, or one to five when `permissive`)
    /// and that every image has features in every stream. Feature entries for
    /// images without captions are dropped.
    pub fn new(
        captions: BTreeMap<String, Vec<String>>,
        streams: Vec<Vec<FeatureEntry>>,
        permissive: bool,
    ) -> Result<Self, DataError> {
        if captions.is_empty() {
            return Err(DataError::Invalid("caption file lists no images".into()));
        }
        let bad: Vec<String> = captions
            .iter()
            .filter(|(_, c)| {
                if permissive {
                    !(1..=CAPTIONS_PER_IMAGE).contains(&c.len())
                } else {
                    c.len() != CAPTIONS_PER_IMAGE
                }
            })
            .map(|(id, _)| id.clone())
            .collect();
        if !bad.is_empty() {
            let expected = if permissive { "1 to 5" } else { "5" };
            return Err(DataError::CaptionCount {
                expected: expected.into(),
                ids: bad,
            });
        }
        let mut maps = Vec::with_capacity(streams.len());
        for (s, entries) in streams.into_iter().enumerate() {
            let map: BTreeMap<String, Tensor<f32>> = entries
                .into_iter()
                .filter(|e| captions.contains_key(&e.id))
                .map(|e| (e.id, e.matrix))
                .collect();
            let missing: Vec<String> = captions.keys().filter(|id| !map.contains_key(*id)).cloned().collect();
            if !missing.is_empty() {
                return Err(DataError::MissingFeatures { stream: s, ids: missing });
            }
            let mut cols = map.values().map(|m| m.shape()[1]);
            let first = cols.next().expect("nonempty");
            if cols.any(|c| c != first) {
                return Err(DataError::Invalid(format!("feature stream {s} mixes column counts")));
            }
            maps.push(map);
        }
        Ok(Self {
            captions,
            streams: maps,
        })
    }

    pub fn num_images(&self) -> usize {
        self.captions.len()
    }

    pub fn num_captions(&self) -> usize {
        self.captions.values().map(Vec::len).sum()
    }

    pub fn ids(&self) -> Vec<String> {
        self.captions.keys().cloned().collect()
    }

    /// Column count of each stream.
    pub fn feature_dims(&self) -> Vec<usize> {
        self.streams
            .iter()
            .map(|m| m.values().next().map_or(0, |t| t.shape()[1]))
            .collect()
    }

    /// Feature matrices of one image, one per stream.
    pub fn features(&self, id: &str) -> Option<Vec<Tensor<f32>>> {
        self.streams.iter().map(|m| m.get(id).cloned()).collect()
    }

    /// Restriction to `ids`, which must all be present.
    pub fn subset(&self, ids: &[String]) -> Result<Self, DataError> {
        let mut captions = BTreeMap::new();
        for id in ids {
            let c = self
                .captions
                .get(id)
                .ok_or_else(|| DataError::Invalid(format!("unknown image id {id}")))?;
            captions.insert(id.clone(), c.clone());
        }
        let streams = self
            .streams
            .iter()
            .map(|m| ids.iter().map(|id| (id.clone(), m[id].clone())).collect())
            .collect();
        Ok(Self { captions, streams })
    }
}

/// Reads the caption JSON and feature files and validates them together.
/// Nothing is returned unless every check passes.
pub fn load_dataset(captions: &Path, features: &[PathBuf], permissive: bool) -> Result<CaptionDataset, DataError> {
    let file: CaptionsFile = read_json(captions)?;
    let streams = features
        .iter()
        .map(|p| read_features(p))
        .collect::<Result<Vec<_>, _>>()?;
    CaptionDataset::new(file.images, streams, permissive)
}
