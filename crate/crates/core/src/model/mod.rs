//! Captioners: a feature adapter feeding an LSTM or a cross-attention
//! transformer decoder.

mod checkpoint;
mod config;
mod decoders;
mod layers;
mod params;

use std::sync::Arc;

use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    default_heads, AdapterKind, ArchitectureConfig, DecoderKind, DEFAULT_DROPOUT, DEFAULT_MAX_BOXES, LAYER_NORM_EPS,
};
pub use decoders::{decode, encode, lstm_forward, lstm_start, lstm_step, transformer_forward, validate_boxes, LstmState};
pub use layers::{causal_mask, lstm_cell_step, positional_encoding, Graph};
pub use params::{init_params, manifest, provably_unused, Init, ModelParams, ParamSpec};

use crate::tensor::{grad_check_many, GradCheckReport, Scalar, Tensor, TensorError};
use crate::text::{TokenId, PAD};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    Config(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("unexpected parameter {0}")]
    UnexpectedParam(String),
    #[error("parameter {name} has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameter {0} has non-finite values")]
    NonFinite(String),
    #[error("feature stream {stream} has shape {got:?}, expected {expected} columns")]
    FeatureDim {
        stream: usize,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("adapter expects {expected} feature streams, got {got}")]
    StreamCount { expected: usize, got: usize },
    #[error("invalid detection input: {0}")]
    Detection(String),
    #[error("empty prefix")]
    EmptyPrefix,
    #[error("prefix of {len} tokens exceeds max_len {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("encoder output has shape {got:?}, expected {expected} row(s)")]
    EncoderRows { expected: usize, got: Vec<usize> },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

/// Architecture plus parameters. Immutable during decoding and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Captioner<F: Scalar> {
    pub config: ArchitectureConfig,
    pub params: ModelParams<F>,
}

impl<F: Scalar> Captioner<F> {
    pub fn new(config: ArchitectureConfig, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ArchitectureConfig, params: ModelParams<F>) -> Result<Self, ModelError> {
        config.validate()?;
        params.validate(&config)?;
        Ok(Self { config, params })
    }

    pub fn cast<G: Scalar>(&self) -> Captioner<G> {
        Captioner {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Encoder tokens `[rows × embed]` for one image.
    pub fn encode(&self, streams: &[Tensor<F>]) -> Result<Tensor<F>, ModelError> {
        let mut g = Graph::inference(&self.params);
        let vars: Vec<_> = streams.iter().map(|s| g.input(s.clone())).collect();
        let enc = encode(&mut g, &self.config, &vars)?;
        Ok(g.value(enc).clone())
    }

    /// Logits `[T × V]` from already encoded tokens.
    pub fn forward_encoded(&self, ids: &[TokenId], enc: &Arc<Tensor<F>>) -> Result<Tensor<F>, ModelError> {
        let mut g = Graph::inference(&self.params);
        let e = g.tape.constant_arc(enc.clone());
        let out = decode(&mut g, &self.config, ids, e)?;
        Ok(g.value(out).clone())
    }

    pub fn forward(&self, ids: &[TokenId], streams: &[Tensor<F>]) -> Result<Tensor<F>, ModelError> {
        let enc = Arc::new(self.encode(streams)?);
        self.forward_encoded(ids, &enc)
    }

    /// Last row of the full forward pass.
    pub fn next_token_logits(&self, prefix: &[TokenId], enc: &Arc<Tensor<F>>) -> Result<Vec<F>, ModelError> {
        let logits = self.forward_encoded(prefix, enc)?;
        let last = logits.outer() - 1;
        Ok(logits.row(last).to_vec())
    }

    pub fn lstm_start(&self, enc: &Arc<Tensor<F>>) -> Result<LstmState<F>, ModelError> {
        let mut g = Graph::inference(&self.params);
        let e = g.tape.constant_arc(enc.clone());
        lstm_start(&mut g, &self.config, e)
    }

    pub fn lstm_step(&self, state: &LstmState<F>, id: TokenId) -> Result<(LstmState<F>, Vec<F>), ModelError> {
        let mut g = Graph::inference(&self.params);
        lstm_step(&mut g, &self.config, state, id)
    }

    /// Mean teacher-forced cross-entropy of `ids` (SOS ... EOS), ignoring PAD targets.
    pub fn loss(&self, ids: &[TokenId], streams: &[Tensor<F>]) -> Result<f64, ModelError> {
        let mut g = Graph::inference(&self.params);
        let vars: Vec<_> = streams.iter().map(|s| g.input(s.clone())).collect();
        let l = teacher_forced_loss(&mut g, &self.config, &vars, ids)?;
        Ok(g.value(l).data()[0].as_f64())
    }
}

/// Input is `ids[..n-1]`, targets are `ids[1..]`.
pub fn teacher_forced_logits<F: Scalar>(
    g: &mut Graph<F>,
    config: &ArchitectureConfig,
    streams: &[crate::tensor::Var],
    ids: &[TokenId],
) -> Result<(crate::tensor::Var, Vec<usize>), ModelError> {
    if ids.len() < 2 {
        return Err(ModelError::EmptyPrefix);
    }
    let enc = encode(g, config, streams)?;
    let logits = decode(g, config, &ids[..ids.len() - 1], enc)?;
    let targets = ids[1..].iter().map(|&t| t as usize).collect();
    Ok((logits, targets))
}

pub fn teacher_forced_loss<F: Scalar>(
    g: &mut Graph<F>,
    config: &ArchitectureConfig,
    streams: &[crate::tensor::Var],
    ids: &[TokenId],
) -> Result<crate::tensor::Var, ModelError> {
    let (logits, targets) = teacher_forced_logits(g, config, streams, ids)?;
    Ok(g.tape.cross_entropy(logits, &targets, Some(PAD as usize))?)
}

/// Finite-difference check of the teacher-forced loss gradient with respect
/// to every parameter of a 64-bit model. Dropout is off.
pub fn check_gradients(
    model: &Captioner<f64>,
    streams: &[Tensor<f64>],
    ids: &[TokenId],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, ModelError> {
    let names: Vec<String> = model.params.names().cloned().collect();
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| (**t).clone()).collect();
    let report = grad_check_many(
        |tape, vars| {
            let mut g = Graph::from_tape(std::mem::take(tape), &model.params);
            for (name, &v) in names.iter().zip(vars) {
                g.bind(name, v);
            }
            let feats: Vec<_> = streams.iter().map(|s| g.input(s.clone())).collect();
            let loss = teacher_forced_loss(&mut g, &model.config, &feats, ids);
            *tape = g.into_tape();
            loss.map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => TensorError::Shape {
                    op: "model",
                    detail: other.to_string(),
                },
            })
        },
        &inputs,
        h,
        tol,
    )?;
    Ok(report)
}
