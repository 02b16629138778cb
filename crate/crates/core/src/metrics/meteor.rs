//! METEOR restricted to exact unigram matches.
//!
//! The alignment maximizes the number of matched unigrams and, among maximal
//! alignments, minimizes the number of chunks (runs that are contiguous in
//! both candidate and reference).

use std::collections::{BTreeMap, HashMap};

use super::{check_corpus, MetricError};

/// Largest match count for which the chunk-minimizing alignment is searched exactly.
pub const EXACT_ALIGNMENT_LIMIT: usize = 12;

const ALPHA_BETA_F_WEIGHT: f64 = 9.0;
const FRAG_GAMMA: f64 = 0.5;
const FRAG_BETA: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

fn max_matches(cand: &[String], refr: &[String]) -> usize {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for w in cand {
        counts.entry(w).or_default().0 += 1;
    }
    for w in refr {
        counts.entry(w).or_default().1 += 1;
    }
    counts.values().map(|&(c, r)| c.min(r)).sum()
}

/// Exact-match alignment between a candidate and one reference.
pub fn align(cand: &[String], refr: &[String]) -> Alignment {
    let matches = max_matches(cand, refr);
    if matches == 0 {
        return Alignment {
            matches: 0,
            chunks: 0,
        };
    }
    let chunks = if matches <= EXACT_ALIGNMENT_LIMIT && refr.len() <= 64 {
        ExactSearch::new(cand, refr, matches).run()
    } else {
        greedy_chunks(cand, refr)
    };
    Alignment { matches, chunks }
}

struct ExactSearch<'a> {
    cand: &'a [String],
    refr: &'a [String],
    target: usize,
    memo: HashMap<(usize, u64, Option<usize>), usize>,
}

const UNREACHABLE: usize = usize::MAX / 2;

impl<'a> ExactSearch<'a> {
    fn new(cand: &'a [String], refr: &'a [String], target: usize) -> Self {
        Self {
            cand,
            refr,
            target,
            memo: HashMap::new(),
        }
    }

    fn run(mut self) -> usize {
        self.best(0, 0, None)
    }

    /// Fewest chunks over positions `i..` given used reference positions `mask`
    /// and the reference position matched by candidate position `i - 1`, if any.
    fn best(&mut self, i: usize, mask: u64, prev: Option<usize>) -> usize {
        let matched = mask.count_ones() as usize;
        if matched == self.target {
            return 0;
        }
        if i == self.cand.len() || matched + (self.cand.len() - i) < self.target {
            return UNREACHABLE;
        }
        if let Some(&v) = self.memo.get(&(i, mask, prev)) {
            return v;
        }
        let mut best = self.best(i + 1, mask, None);
        for j in 0..self.refr.len() {
            if mask & (1 << j) != 0 || self.refr[j] != self.cand[i] {
                continue;
            }
            let opens = usize::from(!(j > 0 && prev == Some(j - 1)));
            let rest = self.best(i + 1, mask | (1 << j), Some(j));
            best = best.min(opens + rest);
        }
        self.memo.insert((i, mask, prev), best);
        best
    }
}

/// Left-to-right matching that extends the current chunk when possible and
/// otherwise opens the chunk at the longest matching run.
fn greedy_chunks(cand: &[String], refr: &[String]) -> usize {
    let mut quota: BTreeMap<&str, usize> = BTreeMap::new();
    {
        let mut cc: BTreeMap<&str, usize> = BTreeMap::new();
        let mut rc: BTreeMap<&str, usize> = BTreeMap::new();
        for w in cand {
            *cc.entry(w).or_default() += 1;
        }
        for w in refr {
            *rc.entry(w).or_default() += 1;
        }
        for (w, c) in cc {
            quota.insert(w, c.min(rc.get(w).copied().unwrap_or(0)));
        }
    }
    let mut used = vec![false; refr.len()];
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for (i, w) in cand.iter().enumerate() {
        let q = quota.get_mut(w.as_str()).expect("every candidate word has a quota");
        if *q == 0 {
            prev = None;
            continue;
        }
        let next = prev.map(|p| p + 1).filter(|&j| j < refr.len() && !used[j] && refr[j] == *w);
        let j = match next {
            Some(j) => j,
            None => {
                chunks += 1;
                (0..refr.len())
                    .filter(|&j| !used[j] && refr[j] == *w)
                    .max_by_key(|&j| (run_length(&cand[i..], &refr[j..], &used[j..]), usize::MAX - j))
                    .expect("quota guarantees an unused reference position")
            }
        };
        used[j] = true;
        *q -= 1;
        prev = Some(j);
    }
    chunks
}

/// Length of the common prefix of `cand` and the unused part of `refr`.
fn run_length(cand: &[String], refr: &[String], used: &[bool]) -> usize {
    cand.iter()
        .zip(refr)
        .zip(used)
        .take_while(|((c, r), &u)| !u && c == r)
        .count()
}

/// Score against a single reference.
pub fn meteor_pair(cand: &[String], refr: &[String]) -> f64 {
    let Alignment { matches, chunks } = align(cand, refr);
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let precision = m / cand.len() as f64;
    let recall = m / refr.len() as f64;
    let f_mean = 10.0 * precision * recall / (recall + ALPHA_BETA_F_WEIGHT * precision);
    let penalty = FRAG_GAMMA * (chunks as f64 / m).powi(FRAG_BETA);
    f_mean * (1.0 - penalty)
}

/// Best score over the reference set.
pub fn meteor_sentence(cand: &[String], refs: &[Vec<String>]) -> f64 {
    refs.iter()
        .map(|r| meteor_pair(cand, r))
        .fold(0.0, f64::max)
}

/// Mean of sentence scores.
pub fn meteor_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<f64, MetricError> {
    check_corpus(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| meteor_sentence(c, r))
        .sum();
    Ok(total / candidates.len() as f64)
}
