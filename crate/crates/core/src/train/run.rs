use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::trainer::{build_examples, validate, Example, Trainer};
use super::{split_dataset, EpochRecord, Split, TrainConfig, TrainError};
use crate::data::{load_dataset, write_file, write_json, write_jsonl, CaptionDataset, DataError, RunConfig};
use crate::model::{write_checkpoint, ArchitectureConfig, Captioner};
use crate::tensor::{Precision, Scalar};
use crate::text::{build_vocab, tokenize, Vocabulary};

/// Wall-clock cost of one epoch, kept apart from `epochs.jsonl` so that file
/// stays byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub epoch: usize,
    pub train_seconds: f64,
    pub validate_seconds: f64,
}

/// Written beside every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize, outputs: Vec<String>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            outputs,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        write_json(&dir.join("manifest.json"), self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub timings: Vec<TimingRecord>,
    /// Epoch (1-based) with the highest validation BLEU-4; ties keep the earlier epoch.
    pub best_epoch: usize,
    pub best_bleu4: f64,
    /// Validation BLEU-4 after the last epoch, always with beam width 3.
    pub final_bleu4: f64,
    pub run_dir: Option<PathBuf>,
}

/// Dataset, split, vocabulary and architecture derived from a run config.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub dataset: CaptionDataset,
    pub split: Split,
    pub vocab: Vocabulary,
    pub architecture: ArchitectureConfig,
}

impl PreparedRun {
    pub fn examples<F: Scalar>(&self, ids: &[String], max_len: usize) -> Result<Vec<Example<F>>, TrainError> {
        build_examples(&self.dataset, ids, &self.vocab, max_len)
    }
}

/// Loads the data, splits it by the training seed and builds the vocabulary
/// from the training captions only.
pub fn prepare_run(run: &RunConfig) -> Result<PreparedRun, TrainError> {
    let dataset = load_dataset(&run.captions, &run.features, run.permissive)?;
    let split = split_dataset(&dataset.ids(), run.train.seed)?;
    let tokens: Vec<Vec<String>> = split
        .train
        .iter()
        .flat_map(|id| dataset.captions[id].iter().map(|c| tokenize(c)))
        .collect();
    let vocab = build_vocab(&tokens, run.min_count);
    let architecture = run
        .architecture
        .resolve(&run.train, vocab.len(), dataset.feature_dims());
    architecture.validate()?;
    Ok(PreparedRun {
        dataset,
        split,
        vocab,
        architecture,
    })
}

fn save_checkpoint<F: Scalar>(
    path: &Path,
    model: &Captioner<F>,
    vocab: &Vocabulary,
) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &model.config, Some(vocab), &model.params)?;
    write_file(path, &buf)?;
    Ok(())
}

/// Trains for `config.epochs` epochs, validating as scheduled. With `out`,
/// rewrites `epochs.jsonl` and `timing.jsonl` after every epoch, saves
/// `best.ickp` whenever validation BLEU-4 improves and `final.ickp` at the end.
pub fn train_on<F: Scalar>(
    model: Captioner<F>,
    vocab: &Vocabulary,
    train: &[Example<F>],
    val: &[Example<F>],
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<(TrainOutcome, Captioner<F>), TrainError> {
    if val.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut records = Vec::with_capacity(config.epochs);
    let mut timings = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64)> = None;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let loss = trainer.train_epoch(train)?;
        let train_seconds = start.elapsed().as_secs_f64();
        let method = config.eval_for_epoch(epoch);
        let v = method
            .map(|m| validate(&trainer.model, val, vocab, m, config.max_len, config.threads))
            .transpose()?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss,
            eval_method: method,
            val_bleu4: v.as_ref().map(|v| v.report.bleu4),
            val_meteor: v.as_ref().map(|v| v.report.meteor),
            val_cider: v.as_ref().map(|v| v.report.cider),
        };
        info!(
            "epoch {epoch}/{} loss {loss:.4}{}",
            config.epochs,
            rec.val_bleu4.map(|b| format!(" val BLEU-4 {b:.4}")).unwrap_or_default()
        );
        if let Some(b) = rec.val_bleu4 {
            if best.is_none_or(|(_, prev)| b > prev) {
                best = Some((epoch, b));
                if let Some(dir) = out {
                    save_checkpoint(&dir.join("best.ickp"), &trainer.model, vocab)?;
                }
            }
        }
        records.push(rec);
        timings.push(TimingRecord {
            epoch,
            train_seconds,
            validate_seconds: v.as_ref().map_or(0.0, |v| v.seconds),
        });
        if let Some(dir) = out {
            write_jsonl(&dir.join("epochs.jsonl"), &records)?;
            write_jsonl(&dir.join("timing.jsonl"), &timings)?;
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&dir.join("final.ickp"), &trainer.model, vocab)?;
    }
    let (best_epoch, best_bleu4) = best.expect("the last epoch is always validated");
    let final_bleu4 = records
        .last()
        .and_then(|r| r.val_bleu4)
        .expect("the last epoch is always validated");
    Ok((
        TrainOutcome {
            records,
            timings,
            best_epoch,
            best_bleu4,
            final_bleu4,
            run_dir: out.map(Path::to_path_buf),
        },
        trainer.model,
    ))
}

fn run_prepared<F: Scalar>(
    prepared: &PreparedRun,
    architecture: &ArchitectureConfig,
    config: &TrainConfig,
    out: &Path,
) -> Result<TrainOutcome, TrainError> {
    let model = Captioner::<F>::new(architecture.clone(), config.seed)?;
    let train = prepared.examples::<F>(&prepared.split.train, config.max_len)?;
    let val = prepared.examples::<F>(&prepared.split.val, config.max_len)?;
    train_on(model, &prepared.vocab, &train, &val, config, Some(out)).map(|(o, _)| o)
}

/// Trains one model on already prepared data into `out`.
pub(crate) fn train_prepared(
    prepared: &PreparedRun,
    architecture: &ArchitectureConfig,
    config: &TrainConfig,
    out: &Path,
) -> Result<TrainOutcome, TrainError> {
    std::fs::create_dir_all(out).map_err(|source| {
        TrainError::Data(DataError::Io {
            path: out.to_path_buf(),
            source,
        })
    })?;
    match config.precision {
        Precision::F32 => run_prepared::<f32>(prepared, architecture, config, out),
        Precision::F64 => run_prepared::<f64>(prepared, architecture, config, out),
    }
}

/// Full `train` pipeline: data, split, vocabulary, training and all run files
/// under `run.run_dir()`.
pub fn train_run(run: &RunConfig) -> Result<TrainOutcome, TrainError> {
    let prepared = prepare_run(run)?;
    let dir = run.run_dir();
    info!(
        "training {} on {} images ({} train / {} val), vocabulary {}",
        run.name,
        prepared.dataset.num_images(),
        prepared.split.train.len(),
        prepared.split.val.len(),
        prepared.vocab.len()
    );
    write_json(&dir.join("split.json"), &prepared.split)?;
    write_file(&dir.join("vocab.json"), prepared.vocab.to_json().as_bytes())?;
    RunManifest::new(
        "train",
        run.train.seed,
        run,
        ["split.json", "vocab.json", "epochs.jsonl", "timing.jsonl", "best.ickp", "final.ickp"]
            .map(String::from)
            .to_vec(),
    )
    .write(&dir)?;
    train_prepared(&prepared, &prepared.architecture, &run.train, &dir)
}

