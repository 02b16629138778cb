//! Teacher-forced training, optimizers, dataset splits, validation and grid search.

mod grid;
mod optim;
mod run;
mod trainer;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grid::{grid_search, GridResult, GridSpec, GridStatus, GridSummary};
pub use optim::{adam_step, clip_global_norm, sgd_step, AdamHyper, AdamState, Grads, Optimizer, OptimizerKind};
pub use run::{prepare_run, train_on, train_run, PreparedRun, RunManifest, TimingRecord, TrainOutcome};
pub use trainer::{build_examples, validate, Example, Trainer, Validation};

use crate::data::DataError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::tensor::Precision;
use crate::text::TextError;

pub const BATCH_SIZES: [usize; 2] = [64, 128];
pub const LEARNING_RATES: [f64; 2] = [1e-3, 5e-4];
pub const EMBED_SIZES: [usize; 2] = [256, 512];
pub const LAYER_COUNTS: [usize; 3] = [1, 2, 4];
pub const DEFAULT_EPOCHS: usize = 50;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;
pub const DEFAULT_BEAM_EVERY: usize = 5;
pub const MIN_SPLIT_IMAGES: usize = 20;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("need at least {MIN_SPLIT_IMAGES} images to split, got {0}")]
    TooFewImages(usize),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (images {images:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        images: Vec<String>,
    },
    #[error("empty {0} set")]
    EmptySet(&'static str),
}

/// Decoder used for validation metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalMethod {
    #[default]
    Greedy,
    Beam3,
}

impl EvalMethod {
    pub fn beam_width(self) -> usize {
        match self {
            EvalMethod::Greedy => 1,
            EvalMethod::Beam3 => 3,
        }
    }
}

/// How the one training reference per image and batch is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceSampling {
    /// Uniform over the image's references.
    #[default]
    Uniform,
    /// Always the first reference.
    First,
}

fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn default_max_len() -> usize {
    crate::text::DEFAULT_MAX_LEN
}
fn default_clip() -> f64 {
    DEFAULT_CLIP_NORM
}
fn default_beam_every() -> usize {
    DEFAULT_BEAM_EVERY
}
fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub embed_size: usize,
    pub num_layers: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Method for routine validation epochs.
    #[serde(default)]
    pub eval_method: EvalMethod,
    /// Every this many epochs validation uses beam width 3 (0 disables). The last epoch always does.
    #[serde(default = "default_beam_every")]
    pub beam_every: usize,
    /// Validate every this many epochs. The last epoch is always validated.
    #[serde(default = "default_one")]
    pub validate_every: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub reference_sampling: ReferenceSampling,
    #[serde(default)]
    pub precision: Precision,
    /// Worker threads for per-example gradients and validation decoding.
    /// Results do not depend on it.
    #[serde(default = "default_one")]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: BATCH_SIZES[0],
            learning_rate: LEARNING_RATES[0],
            embed_size: EMBED_SIZES[0],
            num_layers: LAYER_COUNTS[0],
            epochs: DEFAULT_EPOCHS,
            optimizer: OptimizerKind::default(),
            seed: 0,
            max_len: crate::text::DEFAULT_MAX_LEN,
            eval_method: EvalMethod::default(),
            beam_every: DEFAULT_BEAM_EVERY,
            validate_every: 1,
            clip_norm: DEFAULT_CLIP_NORM,
            reference_sampling: ReferenceSampling::default(),
            precision: Precision::default(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// Grid membership plus basic sanity.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !BATCH_SIZES.contains(&self.batch_size) {
            return bad(format!("batch_size {} not in {BATCH_SIZES:?}", self.batch_size));
        }
        if !LEARNING_RATES.contains(&self.learning_rate) {
            return bad(format!("learning_rate {} not in {LEARNING_RATES:?}", self.learning_rate));
        }
        if !EMBED_SIZES.contains(&self.embed_size) {
            return bad(format!("embed_size {} not in {EMBED_SIZES:?}", self.embed_size));
        }
        if !LAYER_COUNTS.contains(&self.num_layers) {
            return bad(format!("num_layers {} not in {LAYER_COUNTS:?}", self.num_layers));
        }
        self.validate_loop()
    }

    /// Checks that do not involve the hyperparameter grid.
    pub fn validate_loop(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and non-negative", self.learning_rate));
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        if self.validate_every == 0 || self.threads == 0 {
            return bad("validate_every and threads must be at least 1".into());
        }
        Ok(())
    }

    /// Method for validating after `epoch` (1-based), if any.
    pub fn eval_for_epoch(&self, epoch: usize) -> Option<EvalMethod> {
        if epoch == self.epochs {
            return Some(EvalMethod::Beam3);
        }
        if !epoch.is_multiple_of(self.validate_every) {
            return None;
        }
        if self.beam_every > 0 && epoch.is_multiple_of(self.beam_every) {
            Some(EvalMethod::Beam3)
        } else {
            Some(self.eval_method)
        }
    }
}

/// One line of `epochs.jsonl`. Metrics are absent for epochs without validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_method: Option<EvalMethod>,
    pub val_bleu4: Option<f64>,
    pub val_meteor: Option<f64>,
    pub val_cider: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle of the sorted ids, cut into `⌊0.85n⌋ / ⌊0.10n⌋ / rest`.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<Split, TrainError> {
    let n = ids.len();
    if n < MIN_SPLIT_IMAGES {
        return Err(TrainError::TooFewImages(n));
    }
    let mut shuffled = ids.to_vec();
    shuffled.sort();
    shuffled.dedup();
    if shuffled.len() != n {
        return Err(TrainError::Config("image ids are not unique".into()));
    }
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 85 / 100;
    let n_val = n * 10 / 100;
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(Split {
        train: shuffled,
        val,
        test,
    })
}

/// Index of the reference used for one training step.
pub fn sample_reference(num_refs: usize, mode: ReferenceSampling, rng: &mut impl Rng) -> usize {
    assert!(num_refs > 0, "reference set must be nonempty");
    match mode {
        ReferenceSampling::Uniform => rng.gen_range(0..num_refs),
        ReferenceSampling::First => 0,
    }
}

#[cfg(test)]
mod tests;
