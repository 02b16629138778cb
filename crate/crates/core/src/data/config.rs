use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_json, DataError};
use crate::model::{default_heads, AdapterKind, ArchitectureConfig, DecoderKind, DEFAULT_DROPOUT, DEFAULT_MAX_BOXES};
use crate::train::TrainConfig;

/// Environment variable naming the default output root (otherwise `runs`).
pub const OUTPUT_ROOT_ENV: &str = "IMCAP_OUTPUT_ROOT";

fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}

fn default_max_boxes() -> usize {
    DEFAULT_MAX_BOXES
}

fn default_min_count() -> usize {
    crate::text::DEFAULT_MIN_COUNT
}

/// Architecture choices that do not depend on the data. Embedding size and
/// layer count come from the training config; vocabulary size and feature
/// widths from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub decoder: DecoderKind,
    pub adapter: AdapterKind,
    /// Defaults to one head per 64 embedding columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<usize>,
    /// Defaults to four times the embedding size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_size: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_max_boxes")]
    pub max_boxes: usize,
}

impl ArchitectureSpec {
    pub fn new(decoder: DecoderKind, adapter: AdapterKind) -> Self {
        Self {
            decoder,
            adapter,
            num_heads: None,
            ffn_size: None,
            dropout: DEFAULT_DROPOUT,
            max_boxes: DEFAULT_MAX_BOXES,
        }
    }

    pub fn resolve(&self, train: &TrainConfig, vocab_size: usize, feature_dims: Vec<usize>) -> ArchitectureConfig {
        let e = train.embed_size;
        ArchitectureConfig {
            decoder: self.decoder,
            adapter: self.adapter,
            embed_size: e,
            num_layers: train.num_layers,
            num_heads: self.num_heads.unwrap_or_else(|| default_heads(e)),
            ffn_size: self.ffn_size.unwrap_or(4 * e),
            vocab_size,
            max_len: train.max_len,
            dropout: self.dropout,
            feature_dims,
            max_boxes: self.max_boxes,
        }
    }
}

/// Everything `train` needs. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub captions: PathBuf,
    pub features: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Accept 1 to 5 captions per image instead of exactly 5.
    #[serde(default)]
    pub permissive: bool,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    pub architecture: ArchitectureSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let mut c: RunConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut c.captions);
        c.features.iter_mut().for_each(fix);
        if let Some(o) = c.output_dir.as_mut() {
            fix(o);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == ".." {
            return Err(DataError::Invalid(format!("run name {:?} is not a plain directory name", self.name)));
        }
        if self.features.len() != self.architecture.adapter.num_streams() {
            return Err(DataError::Invalid(format!(
                "{:?} adapter needs {} feature file(s), config lists {}",
                self.architecture.adapter,
                self.architecture.adapter.num_streams(),
                self.features.len()
            )));
        }
        self.train.validate().map_err(|e| DataError::Invalid(e.to_string()))
    }

    /// `<output_dir or $IMCAP_OUTPUT_ROOT or runs>/<name>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(output_root)
            .join(&self.name)
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}
