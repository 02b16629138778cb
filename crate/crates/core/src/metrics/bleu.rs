//! Corpus BLEU-4 with per-reference clipping and no smoothing.

use super::{check_corpus, ngram_counts, MetricError, MAX_ORDER};

/// Pooled clipped-match statistics for a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add_sentence(&mut self, cand: &[String], refs: &[Vec<String>]) {
        for n in 1..=MAX_ORDER {
            let counts = ngram_counts(cand, n);
            let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
            for (gram, &c) in &counts {
                let max_ref = ref_counts
                    .iter()
                    .map(|rc| rc.get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                self.matches[n - 1] += c.min(max_ref);
            }
            self.totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
        self.cand_len += cand.len();
        self.ref_len += closest_ref_len(cand.len(), refs);
    }

    pub fn score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            if self.matches[n] == 0 || self.totals[n] == 0 {
                return 0.0;
            }
            log_sum += 0.25 * (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        let (c, r) = (self.cand_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        bp * log_sum.exp()
    }
}

/// Reference length closest to `cand_len`; ties go to the shorter reference.
fn closest_ref_len(cand_len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(cand_len), len))
        .unwrap_or(0)
}

pub fn bleu4_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<f64, MetricError> {
    check_corpus(candidates, references)?;
    let mut stats = BleuStats::default();
    for (cand, refs) in candidates.iter().zip(references) {
        stats.add_sentence(cand, refs);
    }
    Ok(stats.score())
}

/// Single-sentence BLEU-4 using the same unsmoothed rule as the corpus score.
pub fn bleu4_sentence(cand: &[String], refs: &[Vec<String>]) -> f64 {
    let mut stats = BleuStats::default();
    stats.add_sentence(cand, refs);
    stats.score()
}
