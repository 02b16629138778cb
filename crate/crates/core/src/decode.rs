//! Greedy and beam-search caption generation.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::model::{Captioner, ModelError};
use crate::tensor::{log_softmax_f64, Scalar, Tensor};
use crate::text::{TokenId, TokenSequence, EOS, PAD, SOS};

pub const DEFAULT_BEAM_WIDTH: usize = 3;

/// Anything that scores the next token given a prefix starting at SOS.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;
    fn next_token_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>, ModelError>;
}

/// A captioner with one image's encoder tokens fixed.
pub struct BoundCaptioner<'a, F: Scalar> {
    model: &'a Captioner<F>,
    enc: Arc<Tensor<F>>,
}

impl<'a, F: Scalar> BoundCaptioner<'a, F> {
    pub fn new(model: &'a Captioner<F>, streams: &[Tensor<F>]) -> Result<Self, ModelError> {
        let enc = Arc::new(model.encode(streams)?);
        Ok(Self { model, enc })
    }

    pub fn from_encoded(model: &'a Captioner<F>, enc: Arc<Tensor<F>>) -> Self {
        Self { model, enc }
    }
}

impl<F: Scalar> NextTokenModel for BoundCaptioner<'_, F> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn next_token_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        let row = self.model.next_token_logits(prefix, &self.enc)?;
        Ok(row.into_iter().map(Scalar::as_f64).collect())
    }
}

/// Adapts a closure `prefix -> logits` for tests and tables.
pub struct FnModel<G> {
    pub vocab: usize,
    pub f: G,
}

impl<G: Fn(&[TokenId]) -> Vec<f64>> NextTokenModel for FnModel<G> {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_token_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        Ok((self.f)(prefix))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMethod {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub ids: Vec<TokenId>,
    pub logprob_sum: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Log-probability per generated token (SOS excluded).
    pub fn normalized_score(&self) -> f64 {
        normalized(self.logprob_sum, self.ids.len())
    }
}

fn normalized(sum: f64, len: usize) -> f64 {
    sum / (len.saturating_sub(1)).max(1) as f64
}

fn step_logprobs(model: &impl NextTokenModel, prefix: &[TokenId]) -> Result<Vec<f64>, ModelError> {
    let logits = model.next_token_logits(prefix)?;
    if logits.len() != model.vocab_size() {
        return Err(ModelError::Config(format!(
            "model returned {} logits for vocabulary of {}",
            logits.len(),
            model.vocab_size()
        )));
    }
    Ok(log_softmax_f64(&logits))
}

fn selectable(id: usize) -> bool {
    id != PAD as usize && id != SOS as usize
}

/// Higher score first, then lexicographically smaller ids.
fn rank(a_sum: f64, a_ids: &[TokenId], b_sum: f64, b_ids: &[TokenId]) -> Ordering {
    b_sum.total_cmp(&a_sum).then_with(|| a_ids.cmp(b_ids))
}

/// Repeated argmax from SOS until EOS or `max_len` ids; ties go to the lowest id.
pub fn greedy_decode(model: &impl NextTokenModel, max_len: usize) -> Result<TokenSequence, ModelError> {
    let max_len = max_len.max(2);
    let mut ids = vec![SOS];
    let mut sum = 0.0;
    while ids.len() < max_len && ids.last() != Some(&EOS) {
        let logp = step_logprobs(model, &ids)?;
        let mut best: Option<(usize, f64)> = None;
        for (id, &lp) in logp.iter().enumerate() {
            if !selectable(id) {
                continue;
            }
            // Compare cumulative sums so width-1 beam search makes identical choices.
            let s = sum + lp;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((id, s));
            }
        }
        let (id, s) = best.ok_or_else(|| ModelError::Config("no selectable tokens".into()))?;
        ids.push(id as TokenId);
        sum = s;
    }
    Ok(TokenSequence { ids, max_len })
}

/// One pruning step: every single-token expansion of the live beam, and the kept subset.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamStep {
    pub live_before: Vec<Hypothesis>,
    pub kept: Vec<Hypothesis>,
    pub slots: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    pub retired: Vec<Hypothesis>,
    pub steps: Vec<BeamStep>,
}

/// Beam search keeping the top `width - retired` expansions by cumulative
/// log-probability. Hypotheses ending in EOS or reaching `max_len` retire.
/// The answer maximizes log-probability per generated token.
pub fn beam_search(model: &impl NextTokenModel, max_len: usize, width: usize) -> Result<BeamResult, ModelError> {
    let max_len = max_len.max(2);
    let width = width.max(1);
    let mut live = vec![Hypothesis {
        ids: vec![SOS],
        logprob_sum: 0.0,
        finished: false,
    }];
    let mut retired: Vec<Hypothesis> = Vec::new();
    let mut steps = Vec::new();
    while !live.is_empty() && retired.len() < width {
        let slots = width - retired.len();
        let mut candidates: Vec<(f64, Vec<TokenId>)> = Vec::new();
        for h in &live {
            let logp = step_logprobs(model, &h.ids)?;
            for (id, &lp) in logp.iter().enumerate() {
                if selectable(id) {
                    let mut ids = h.ids.clone();
                    ids.push(id as TokenId);
                    candidates.push((h.logprob_sum + lp, ids));
                }
            }
        }
        candidates.sort_by(|a, b| rank(a.0, &a.1, b.0, &b.1));
        candidates.truncate(slots);
        let kept: Vec<Hypothesis> = candidates
            .into_iter()
            .map(|(logprob_sum, ids)| {
                let finished = ids.last() == Some(&EOS) || ids.len() >= max_len;
                Hypothesis {
                    ids,
                    logprob_sum,
                    finished,
                }
            })
            .collect();
        let before = std::mem::take(&mut live);
        for h in &kept {
            if h.finished {
                retired.push(h.clone());
            } else {
                live.push(h.clone());
            }
        }
        steps.push(BeamStep {
            live_before: before,
            kept,
            slots,
        });
    }
    let best = retired
        .iter()
        .chain(&live)
        .min_by(|a, b| rank(a.normalized_score(), &a.ids, b.normalized_score(), &b.ids))
        .cloned()
        .expect("beam search always produces a hypothesis");
    Ok(BeamResult { best, retired, steps })
}

pub fn beam_search_decode(
    model: &impl NextTokenModel,
    max_len: usize,
    width: usize,
) -> Result<TokenSequence, ModelError> {
    let r = beam_search(model, max_len, width)?;
    Ok(TokenSequence {
        ids: r.best.ids,
        max_len: max_len.max(2),
    })
}

pub fn decode_with(
    model: &impl NextTokenModel,
    method: DecodeMethod,
    max_len: usize,
    width: usize,
) -> Result<TokenSequence, ModelError> {
    match method {
        DecodeMethod::Greedy => greedy_decode(model, max_len),
        DecodeMethod::Beam => beam_search_decode(model, max_len, width),
    }
}

/// Sum of per-step log-probabilities of `ids[1..]` given each prefix.
pub fn score_sequence(model: &impl NextTokenModel, ids: &[TokenId]) -> Result<f64, ModelError> {
    if ids.first() != Some(&SOS) {
        return Err(ModelError::Config("sequence must start with SOS".into()));
    }
    let mut total = 0.0;
    for t in 1..ids.len() {
        let logp = step_logprobs(model, &ids[..t])?;
        let id = ids[t] as usize;
        total += *logp.get(id).ok_or(ModelError::TokenOutOfRange {
            id: ids[t],
            vocab: logp.len(),
        })?;
    }
    Ok(total)
}

/// Length-normalized score as used for final beam selection.
pub fn normalized_score(model: &impl NextTokenModel, ids: &[TokenId]) -> Result<f64, ModelError> {
    Ok(normalized(score_sequence(model, ids)?, ids.len()))
}
