//! Seeded synthetic captioning data.
//!
//! Every image draws one value for each attribute slot (color, animal,
//! action, place). Features are sums of per-value embedding vectors plus
//! Gaussian noise, and the five captions spell the attributes out through
//! five fixed templates, so features determine the caption content.
//! With two streams the slots are split between them: stream 0 carries color
//! and action, stream 1 carries animal and place.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{ArchitectureSpec, RunConfig};
use super::features::{write_features, FeatureEntry};
use super::{write_json, CaptionsFile, DataError};
use crate::model::{AdapterKind, DecoderKind};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const SLOT_NAMES: [&str; 4] = ["color", "animal", "action", "place"];

const WORDS: [[&str; 12]; 4] = [
    [
        "red", "blue", "green", "yellow", "black", "white", "brown", "orange", "purple", "pink", "gray", "silver",
    ],
    [
        "dog", "cat", "horse", "bird", "cow", "sheep", "fox", "bear", "rabbit", "duck", "goat", "deer",
    ],
    [
        "running", "sleeping", "jumping", "eating", "sitting", "standing", "playing", "walking", "resting",
        "swimming", "climbing", "hiding",
    ],
    [
        "park", "field", "beach", "garden", "forest", "street", "yard", "river", "barn", "road", "meadow", "hill",
    ],
];

const WORLD_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_images: usize,
    /// Number of distinct attribute words, split evenly across the four slots.
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// 1 or 2.
    pub streams: usize,
    pub seed: u64,
    /// Index of the first generated image; later indices extend the same world.
    #[serde(default)]
    pub first_index: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.1
}

impl SyntheticConfig {
    pub fn new(num_images: usize, seed: u64) -> Self {
        Self {
            num_images,
            vocab_size: 16,
            feature_dim: 32,
            streams: 1,
            seed,
            first_index: 0,
            noise: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Invalid(m.to_string()));
        if self.num_images == 0 || self.vocab_size == 0 || self.feature_dim == 0 {
            return bad("synthetic sizes must be at least 1");
        }
        if !(1..=2).contains(&self.streams) {
            return bad("synthetic data supports 1 or 2 streams");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative number");
        }
        Ok(())
    }

    pub fn values_per_slot(&self) -> usize {
        (self.vocab_size / SLOT_NAMES.len()).max(2)
    }

    /// Slots whose embeddings feed stream `s`.
    pub fn stream_slots(&self, s: usize) -> Vec<usize> {
        if self.streams == 1 {
            vec![0, 1, 2, 3]
        } else if s == 0 {
            vec![0, 2]
        } else {
            vec![1, 3]
        }
    }
}

pub fn slot_word(slot: usize, value: usize) -> String {
    WORDS[slot]
        .get(value)
        .map_or_else(|| format!("{}{value}", SLOT_NAMES[slot]), |w| w.to_string())
}

fn captions_for(v: &[String; 4]) -> Vec<String> {
    let [color, animal, action, place] = v;
    vec![
        format!("a {color} {animal} {action} in the {place}"),
        format!("the {color} {animal} is {action} in the {place}"),
        format!("a {animal} that is {color} {action} near the {place}"),
        format!("in the {place} a {color} {animal} is {action}"),
        format!("there is a {color} {animal} {action} at the {place}"),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub captions: BTreeMap<String, Vec<String>>,
    /// Slot values of each image, in slot order.
    pub attributes: BTreeMap<String, [usize; 4]>,
    pub streams: Vec<Vec<FeatureEntry>>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Pure function of `config`.
pub fn gen_synthetic(config: &SyntheticConfig) -> Result<SyntheticData, DataError> {
    config.validate()?;
    let k = config.values_per_slot();
    let d = config.feature_dim;
    let mut world = ChaCha8Rng::seed_from_u64(config.seed);
    world.set_stream(WORLD_STREAM);
    // embeddings[stream][slot][value] -> d-vector
    let embeddings: Vec<Vec<Vec<Vec<f64>>>> = (0..config.streams)
        .map(|_| {
            (0..SLOT_NAMES.len())
                .map(|_| (0..k).map(|_| (0..d).map(|_| normal(&mut world)).collect()).collect())
                .collect()
        })
        .collect();
    let mut data = SyntheticData {
        captions: BTreeMap::new(),
        attributes: BTreeMap::new(),
        streams: vec![Vec::with_capacity(config.num_images); config.streams],
    };
    for index in config.first_index..config.first_index + config.num_images {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(index as u64);
        let values: [usize; 4] = std::array::from_fn(|_| rng.gen_range(0..k));
        let id = format!("img{index:05}");
        let words: [String; 4] = std::array::from_fn(|s| slot_word(s, values[s]));
        for (s, stream) in data.streams.iter_mut().enumerate() {
            let slots = config.stream_slots(s);
            let row: Vec<f32> = (0..d)
                .map(|j| {
                    let signal: f64 = slots.iter().map(|&slot| embeddings[s][slot][values[slot]][j]).sum();
                    (signal + config.noise * normal(&mut rng)) as f32
                })
                .collect();
            stream.push(FeatureEntry::new(id.clone(), Tensor::new(vec![1, d], row).expect("sizes agree")));
        }
        data.captions.insert(id.clone(), captions_for(&words));
        data.attributes.insert(id, values);
    }
    Ok(data)
}

/// Writes `captions.json`, `features_<s>.icfr` and a runnable `config.json`
/// into `out`. Returns the config path.
pub fn write_synthetic(out: &Path, config: &SyntheticConfig) -> Result<PathBuf, DataError> {
    let data = gen_synthetic(config)?;
    write_json(&out.join("captions.json"), &CaptionsFile {
        images: data.captions,
    })?;
    let mut features = Vec::new();
    for (s, entries) in data.streams.iter().enumerate() {
        let name = PathBuf::from(format!("features_{s}.icfr"));
        write_features(&out.join(&name), entries)?;
        features.push(name);
    }
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| "synthetic".into());
    let adapter = if config.streams == 2 {
        AdapterKind::Stacked
    } else {
        AdapterKind::Single
    };
    let run = RunConfig {
        name,
        captions: PathBuf::from("captions.json"),
        features,
        output_dir: None,
        permissive: false,
        min_count: 1,
        architecture: ArchitectureSpec::new(DecoderKind::Transformer, adapter),
        train: TrainConfig {
            seed: config.seed,
            ..TrainConfig::default()
        },
    };
    let path = out.join("config.json");
    write_json(&path, &run)?;
    Ok(path)
}
