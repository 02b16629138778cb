//! CIDEr: TF-IDF weighted n-gram cosine similarity, averaged over references
//! and orders 1..=4, scaled by 10. Document frequencies come from the
//! evaluated corpus, one document per image reference set.

use std::collections::{BTreeMap, BTreeSet};

use super::{check_corpus, ngram_counts, MetricError, NgramCounts, MAX_ORDER};

const SCALE: f64 = 10.0;

type Weighted<'a> = BTreeMap<&'a [String], f64>;

fn weigh<'a>(counts: &NgramCounts<'a>, df: &BTreeMap<&[String], usize>, num_images: f64) -> Weighted<'a> {
    counts
        .iter()
        .map(|(&g, &c)| {
            let d = df.get(g).copied().unwrap_or(0) as f64;
            let idf = (num_images / (1.0 + d)).ln().max(0.0);
            (g, c as f64 * idf)
        })
        .collect()
}

fn cosine(a: &Weighted<'_>, b: &Weighted<'_>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(g, &x)| b.get(g).map(|&y| x * y))
        .sum();
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-image CIDEr scores.
pub fn cider_sentences(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<Vec<f64>, MetricError> {
    check_corpus(candidates, references)?;
    let num_images = candidates.len() as f64;
    let mut scores = vec![0.0; candidates.len()];
    for n in 1..=MAX_ORDER {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for refs in references {
            let grams: BTreeSet<&[String]> = refs
                .iter()
                .flat_map(|r| ngram_counts(r, n).into_keys())
                .collect();
            for g in grams {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (score, (cand, refs)) in scores.iter_mut().zip(candidates.iter().zip(references)) {
            let cv = weigh(&ngram_counts(cand, n), &df, num_images);
            let sim: f64 = refs
                .iter()
                .map(|r| cosine(&cv, &weigh(&ngram_counts(r, n), &df, num_images)))
                .sum::<f64>()
                / refs.len() as f64;
            *score += sim / MAX_ORDER as f64;
        }
    }
    Ok(scores.into_iter().map(|s| s * SCALE).collect())
}

pub fn cider_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<f64, MetricError> {
    let scores = cider_sentences(candidates, references)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
