//! Command-line front end. `run` parses arguments, dispatches and maps
//! failures to exit codes: 0 success, 1 usage or validation error, 2 I/O error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{
    read_features, read_json, write_file, write_json, write_synthetic, CaptionsFile, DataError, RunConfig,
    SyntheticConfig,
};
use crate::decode::{beam_search_decode, greedy_decode, BoundCaptioner, DEFAULT_BEAM_WIDTH};
use crate::metrics::{evaluate_captions, MetricError, MetricReport};
use crate::model::{Captioner, Checkpoint, ModelError};
use crate::tensor::Tensor;
use crate::text::{build_vocab, decode, tokenize, TextError, TokenId, Vocabulary, DEFAULT_MIN_COUNT};
use crate::train::{grid_search, train_run, GridSpec, RunManifest, Split, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "imcap", version, about = "Image captioning over precomputed features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary from caption JSON.
    BuildVocab(BuildVocabArgs),
    /// Generate a seeded synthetic dataset with a runnable config.
    GenSynthetic(GenSyntheticArgs),
    /// Train one model from a run config.
    Train(TrainArgs),
    /// Train every point of a hyperparameter grid and rank them.
    Gridsearch(GridArgs),
    /// Caption images with a checkpoint.
    Caption(CaptionArgs),
    /// Caption a dataset split with a checkpoint and score it.
    Evaluate(EvaluateArgs),
    /// Score candidate captions against references.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub captions: PathBuf,
    /// Only use images listed in this split file's `train` list.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    pub min_count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    pub images: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub streams: usize,
    #[arg(long, default_value_t = 0)]
    pub first_index: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// JSON grid (`batch_sizes`, `learning_rates`, `embed_sizes`, `num_layers`); defaults to the full grid.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Grid points trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Defaults to `<output root>/<config name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Greedy,
    Beam,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Feature file per stream, in adapter order.
    #[arg(long, required = true)]
    pub features: Vec<PathBuf>,
    /// Vocabulary file, needed only if the checkpoint has none.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Beam)]
    pub method: MethodArg,
    #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
    pub beam_width: usize,
    /// Defaults to the checkpoint's maximum length.
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Images to caption (repeatable); all images in the feature files by default.
    #[arg(long)]
    pub image_id: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SubsetArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub captions: PathBuf,
    /// Split file written by `train`; required unless `--subset all`.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SubsetArg::Test)]
    pub subset: SubsetArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub references: PathBuf,
    /// Full report with per-image scores.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Invalid(e.to_string())
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<TextError> for CliError {
    fn from(e: TextError) -> Self {
        match e {
            TextError::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => d.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Text(t) => t.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::BuildVocab(a) => build_vocab_cmd(a),
        Command::GenSynthetic(a) => gen_synthetic_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Gridsearch(a) => grid_cmd(a),
        Command::Caption(a) => caption_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Metrics(a) => metrics_cmd(a),
    }
}

/// Manifest path for a single-file output: `<file>.manifest.json`.
fn manifest_beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_manifest_beside(out: &Path, m: &RunManifest) -> Result<(), CliError> {
    write_json(&manifest_beside(out), m)?;
    Ok(())
}

fn build_vocab_cmd(a: BuildVocabArgs) -> Result<(), CliError> {
    let file: CaptionsFile = read_json(&a.captions)?;
    let ids: Vec<String> = match &a.split {
        Some(p) => read_json::<Split>(p)?.train,
        None => file.images.keys().cloned().collect(),
    };
    let mut tokens = Vec::new();
    for id in &ids {
        let caps = file
            .images
            .get(id)
            .ok_or_else(|| CliError::Invalid(format!("split lists unknown image {id}")))?;
        tokens.extend(caps.iter().map(|c| tokenize(c)));
    }
    let vocab = build_vocab(&tokens, a.min_count);
    write_file(&a.out, vocab.to_json().as_bytes())?;
    info!("vocabulary of {} tokens from {} images", vocab.len(), ids.len());
    let args = serde_json::json!({
        "captions": a.captions, "split": a.split, "min_count": a.min_count,
    });
    write_manifest_beside(&a.out, &RunManifest::new("build-vocab", 0, &args, vec![file_name(&a.out)]))
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn gen_synthetic_cmd(a: GenSyntheticArgs) -> Result<(), CliError> {
    let cfg = SyntheticConfig {
        num_images: a.images,
        vocab_size: a.vocab_size,
        feature_dim: a.feature_dim,
        streams: a.streams,
        seed: a.seed,
        first_index: a.first_index,
        noise: a.noise,
    };
    let config_path = write_synthetic(&a.out, &cfg)?;
    let mut outputs = vec!["captions.json".to_string(), "config.json".to_string()];
    outputs.extend((0..cfg.streams).map(|s| format!("features_{s}.icfr")));
    RunManifest::new("gen-synthetic", cfg.seed, &cfg, outputs).write(&a.out)?;
    info!("wrote {} images; run config at {}", cfg.num_images, config_path.display());
    Ok(())
}

fn load_run(path: &Path, epochs: Option<usize>) -> Result<RunConfig, CliError> {
    let mut run = RunConfig::load(path)?;
    if let Some(e) = epochs {
        run.train.epochs = e;
    }
    run.validate()?;
    Ok(run)
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let mut run = load_run(&a.config, a.epochs)?;
    if let Some(o) = a.output_dir {
        run.output_dir = Some(o);
    }
    if let Some(t) = a.threads {
        run.train.threads = t;
    }
    run.validate()?;
    let o = train_run(&run)?;
    println!(
        "{}",
        serde_json::json!({
            "run_dir": run.run_dir(),
            "best_epoch": o.best_epoch,
            "best_bleu4": o.best_bleu4,
            "final_bleu4": o.final_bleu4,
        })
    );
    Ok(())
}

fn grid_cmd(a: GridArgs) -> Result<(), CliError> {
    let run = load_run(&a.config, a.epochs)?;
    let grid: GridSpec = match &a.grid {
        Some(p) => read_json(p)?,
        None => GridSpec::default(),
    };
    let out = a.out.unwrap_or_else(|| run.run_dir());
    let summary = grid_search(&run, &grid, &out, a.jobs)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

struct Decoder {
    model: Captioner<f64>,
    vocab: Vocabulary,
    streams: Vec<BTreeMap<String, Tensor<f32>>>,
    method: MethodArg,
    width: usize,
    max_len: usize,
}

impl Decoder {
    fn load(a: &DecodeArgs) -> Result<Self, CliError> {
        let ckpt = Checkpoint::load(&a.checkpoint)?;
        let vocab = match (&a.vocab, &ckpt.vocab) {
            (Some(p), _) => Vocabulary::load(p)?,
            (None, Some(v)) => v.clone(),
            (None, None) => return Err(CliError::Invalid("checkpoint has no vocabulary; pass --vocab".into())),
        };
        if vocab.len() != ckpt.architecture.vocab_size {
            return Err(CliError::Invalid(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                ckpt.architecture.vocab_size
            )));
        }
        let model: Captioner<f64> = ckpt.captioner()?;
        let need = model.config.adapter.num_streams();
        if a.features.len() != need {
            return Err(CliError::Invalid(format!(
                "model takes {need} feature stream(s), got {}",
                a.features.len()
            )));
        }
        let streams = a
            .features
            .iter()
            .map(|p| Ok(read_features(p)?.into_iter().map(|e| (e.id, e.matrix)).collect()))
            .collect::<Result<Vec<_>, CliError>>()?;
        if a.beam_width == 0 {
            return Err(CliError::Invalid("beam width must be at least 1".into()));
        }
        let max_len = a.max_len.unwrap_or(model.config.max_len);
        Ok(Self {
            model,
            vocab,
            streams,
            method: a.method,
            width: a.beam_width,
            max_len,
        })
    }

    fn ids(&self) -> Vec<String> {
        self.streams[0]
            .keys()
            .filter(|id| self.streams.iter().all(|s| s.contains_key(*id)))
            .cloned()
            .collect()
    }

    fn caption(&self, id: &str) -> Result<(Vec<TokenId>, String), CliError> {
        let feats: Vec<Tensor<f64>> = self
            .streams
            .iter()
            .map(|s| s.get(id).map(Tensor::cast))
            .collect::<Option<_>>()
            .ok_or_else(|| CliError::Invalid(format!("no features for image {id}")))?;
        let bound = BoundCaptioner::new(&self.model, &feats)?;
        let seq = match self.method {
            MethodArg::Greedy => greedy_decode(&bound, self.max_len)?,
            MethodArg::Beam => beam_search_decode(&bound, self.max_len, self.width)?,
        };
        let text = decode(&seq.ids, &self.vocab)?;
        Ok((seq.ids, text))
    }
}

/// `caption` output: caption text per image plus the decoded ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionOutput {
    pub captions: BTreeMap<String, String>,
    pub token_ids: BTreeMap<String, Vec<TokenId>>,
}

fn decode_args_json(a: &DecodeArgs) -> serde_json::Value {
    serde_json::json!({
        "checkpoint": a.checkpoint, "features": a.features, "vocab": a.vocab,
        "method": format!("{:?}", a.method).to_lowercase(), "beam_width": a.beam_width, "max_len": a.max_len,
    })
}

fn caption_cmd(a: CaptionArgs) -> Result<(), CliError> {
    let dec = Decoder::load(&a.decode)?;
    let ids = if a.image_id.is_empty() { dec.ids() } else { a.image_id.clone() };
    let mut out = CaptionOutput {
        captions: BTreeMap::new(),
        token_ids: BTreeMap::new(),
    };
    for id in ids {
        let (tok, text) = dec.caption(&id)?;
        out.captions.insert(id.clone(), text);
        out.token_ids.insert(id, tok);
    }
    write_json(&a.out, &out)?;
    let mut args = decode_args_json(&a.decode);
    args["image_id"] = serde_json::json!(a.image_id);
    write_manifest_beside(&a.out, &RunManifest::new("caption", 0, &args, vec![file_name(&a.out)]))
}

/// `evaluate` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub subset: String,
    pub method: String,
    pub report: MetricReport,
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<(), CliError> {
    let dec = Decoder::load(&a.decode)?;
    let file: CaptionsFile = read_json(&a.captions)?;
    let ids: Vec<String> = match (a.subset, &a.split) {
        (SubsetArg::All, _) => file.images.keys().cloned().collect(),
        (_, None) => return Err(CliError::Invalid("--split is required unless --subset all".into())),
        (s, Some(p)) => {
            let split: Split = read_json(p)?;
            match s {
                SubsetArg::Train => split.train,
                SubsetArg::Val => split.val,
                _ => split.test,
            }
        }
    };
    let mut cands = BTreeMap::new();
    let mut refs = BTreeMap::new();
    for id in ids {
        let r = file
            .images
            .get(&id)
            .ok_or_else(|| CliError::Invalid(format!("no references for image {id}")))?;
        refs.insert(id.clone(), r.clone());
        cands.insert(id.clone(), dec.caption(&id)?.1);
    }
    let report = evaluate_captions(&cands, &refs)?;
    println!(
        "{}",
        serde_json::json!({"bleu4": report.bleu4, "meteor-exact": report.meteor, "cider": report.cider})
    );
    let subset = format!("{:?}", a.subset).to_lowercase();
    let method = format!("{:?}", a.decode.method).to_lowercase();
    write_json(&a.out, &EvaluationOutput { subset, method, report })?;
    let mut args = decode_args_json(&a.decode);
    args["captions"] = serde_json::json!(a.captions);
    args["split"] = serde_json::json!(a.split);
    write_manifest_beside(&a.out, &RunManifest::new("evaluate", 0, &args, vec![file_name(&a.out)]))
}

/// Accepted caption file layouts: `{"images": {id: [..]}}`, `{"captions": {id: ..}}`,
/// or a bare object mapping ids to a caption or a list of captions.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum CaptionLayout {
    Images { images: BTreeMap<String, OneOrMany> },
    Captions { captions: BTreeMap<String, OneOrMany> },
    Bare(BTreeMap<String, OneOrMany>),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<String> {
        match self {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v,
        }
    }
}

fn read_caption_map(path: &Path) -> Result<BTreeMap<String, Vec<String>>, CliError> {
    let layout: CaptionLayout = read_json(path)?;
    let map = match layout {
        CaptionLayout::Images { images: m } | CaptionLayout::Captions { captions: m } | CaptionLayout::Bare(m) => m,
    };
    Ok(map.into_iter().map(|(k, v)| (k, v.into_vec())).collect())
}

fn metrics_cmd(a: MetricsArgs) -> Result<(), CliError> {
    let cands_raw = read_caption_map(&a.candidates)?;
    let refs = read_caption_map(&a.references)?;
    let mut cands = BTreeMap::new();
    for (id, c) in cands_raw {
        let first = c
            .into_iter()
            .next()
            .ok_or_else(|| CliError::Invalid(format!("no candidate caption for {id}")))?;
        if !refs.contains_key(&id) {
            return Err(CliError::Invalid(format!("no references for image {id}")));
        }
        cands.insert(id, first);
    }
    let report = evaluate_captions(&cands, &refs)?;
    println!(
        "{}",
        serde_json::json!({"bleu4": report.bleu4, "meteor-exact": report.meteor, "cider": report.cider})
    );
    if let Some(out) = &a.out {
        write_json(out, &report)?;
        let args = serde_json::json!({"candidates": a.candidates, "references": a.references});
        write_manifest_beside(out, &RunManifest::new("metrics", 0, &args, vec![file_name(out)]))?;
    }
    Ok(())
}
