//! Multi-reference caption metrics: corpus BLEU-4, exact-match METEOR and CIDEr.
//!
//! All maps are ordered so floating-point reductions happen in a fixed order
//! and repeated evaluations are bit-identical.

mod bleu;
mod cider;
mod meteor;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::{bleu4_corpus, bleu4_sentence, BleuStats};
pub use cider::{cider_corpus, cider_sentences};
pub use meteor::{align, meteor_corpus, meteor_sentence, Alignment};

use crate::text::tokenize;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("candidate corpus is empty")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} reference sets")]
    LengthMismatch {
        candidates: usize,
        references: usize,
    },
    #[error("reference set {0} is empty")]
    EmptyReferenceSet(usize),
}

/// Multiset of contiguous n-grams of one order.
pub type NgramCounts<'a> = BTreeMap<&'a [String], usize>;

/// Sliding-window counts of contiguous `n`-grams.
pub fn ngram_counts(tokens: &[String], n: usize) -> NgramCounts<'_> {
    assert!((1..=MAX_ORDER).contains(&n), "n-gram order must be in 1..=4");
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

pub(crate) fn check_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<(), MetricError> {
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(MetricError::EmptyReferenceSet(i));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub image_id: String,
    pub candidate: String,
    pub references: Vec<String>,
    pub bleu4: f64,
    #[serde(rename = "meteor-exact")]
    pub meteor: f64,
    pub cider: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    #[serde(rename = "meteor-exact")]
    pub meteor: f64,
    pub cider: f64,
    pub per_image: Vec<ImageScores>,
}

/// Scores tokenized candidates against their reference sets.
pub fn evaluate_corpus(
    image_ids: &[String],
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<MetricReport, MetricError> {
    check_corpus(candidates, references)?;
    if image_ids.len() != candidates.len() {
        return Err(MetricError::LengthMismatch {
            candidates: candidates.len(),
            references: image_ids.len(),
        });
    }
    let bleu4 = bleu4_corpus(candidates, references)?;
    let meteor = meteor_corpus(candidates, references)?;
    let ciders = cider_sentences(candidates, references)?;
    let cider = ciders.iter().sum::<f64>() / ciders.len() as f64;
    let per_image = image_ids
        .iter()
        .zip(candidates)
        .zip(references)
        .zip(&ciders)
        .map(|(((id, cand), refs), &c)| ImageScores {
            image_id: id.clone(),
            candidate: cand.join(" "),
            references: refs.iter().map(|r| r.join(" ")).collect(),
            bleu4: bleu4_sentence(cand, refs),
            meteor: meteor_sentence(cand, refs),
            cider: c,
        })
        .collect();
    Ok(MetricReport {
        bleu4,
        meteor,
        cider,
        per_image,
    })
}

/// Tokenizes raw caption strings keyed by image id and scores them.
///
/// Every candidate id must have a reference set; ids are processed in sorted order.
pub fn evaluate_captions(
    candidates: &BTreeMap<String, String>,
    references: &BTreeMap<String, Vec<String>>,
) -> Result<MetricReport, MetricError> {
    let mut ids = Vec::new();
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for (i, (id, cand)) in candidates.iter().enumerate() {
        let r = references.get(id).ok_or(MetricError::EmptyReferenceSet(i))?;
        ids.push(id.clone());
        cands.push(tokenize(cand));
        refs.push(r.iter().map(|s| tokenize(s)).collect());
    }
    evaluate_corpus(&ids, &cands, &refs)
}

#[cfg(test)]
pub(crate) fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}
