#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use imcap::model::{manifest, AdapterKind, ArchitectureConfig, Captioner, DecoderKind, Init, ModelParams};
use imcap::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Tiny architecture: e=8, 2 heads, V=11 unless overridden.
pub fn tiny(decoder: DecoderKind, adapter: AdapterKind, vocab: usize) -> ArchitectureConfig {
    let dims = match adapter {
        AdapterKind::Single => vec![5],
        AdapterKind::Detection => vec![7],
        AdapterKind::Stacked => vec![5, 3],
    };
    let mut c = ArchitectureConfig::new(decoder, adapter, 8, 1, vocab, dims);
    c.num_heads = 2;
    c.ffn_size = 12;
    c.max_boxes = 3;
    c.max_len = 6;
    c.dropout = 0.0;
    c
}

/// Every parameter drawn from a wide uniform so no unit is trivially inert.
pub fn random_model(config: ArchitectureConfig, seed: u64) -> Captioner<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = BTreeMap::new();
    for s in manifest(&config) {
        let n: usize = s.shape.iter().product();
        let data: Vec<f64> = match s.init {
            Init::Ones => (0..n).map(|_| rng.gen_range(0.5..1.5)).collect(),
            _ => (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect(),
        };
        map.insert(s.name, Tensor::new(s.shape, data).unwrap());
    }
    Captioner::from_parts(config, ModelParams::from_map(map)).unwrap()
}

pub fn rand_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn boxes(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut r: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let c = rng.gen_range(0..classes);
            r.extend((0..classes).map(|k| if k == c { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

pub fn streams_for(config: &ArchitectureConfig, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    match config.adapter {
        AdapterKind::Single => vec![rand_rows(rng, 1, config.feature_dims[0])],
        AdapterKind::Detection => {
            let n = rng.gen_range(1..=config.max_boxes);
            vec![boxes(rng, n, config.num_classes())]
        }
        AdapterKind::Stacked => vec![
            rand_rows(rng, 1, config.feature_dims[0]),
            rand_rows(rng, 1, config.feature_dims[1]),
        ],
    }
}

// Brute-force metric oracles. They recount everything from scratch with
// plain vectors and share no code with the library.

fn grams(s: &[String], n: usize) -> Vec<Vec<String>> {
    if s.len() < n {
        return vec![];
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub fn oracle_bleu4(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let mut m = [0usize; 4];
    let mut t = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, rs) in cands.iter().zip(refs) {
        for n in 1..=4 {
            let cg = grams(c, n);
            let distinct: BTreeSet<&Vec<String>> = cg.iter().collect();
            for g in distinct {
                let mx = rs.iter().map(|r| count(&grams(r, n), g)).max().unwrap();
                m[n - 1] += count(&cg, g).min(mx);
            }
            t[n - 1] += cg.len();
        }
        c_len += c.len();
        let mut best = rs[0].len();
        for r in rs {
            let (d, bd) = ((r.len() as i64 - c.len() as i64).abs(), (best as i64 - c.len() as i64).abs());
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        r_len += best;
    }
    if (0..4).any(|i| m[i] == 0) || c_len == 0 {
        return 0.0;
    }
    let geo = (0..4).map(|i| (m[i] as f64 / t[i] as f64).ln() / 4.0).sum::<f64>().exp();
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    bp * geo
}

/// Enumerates every exact-match alignment; returns (max matches, min chunks at max).
pub fn oracle_alignment(c: &[String], r: &[String]) -> (usize, usize) {
    fn rec(c: &[String], r: &[String], i: usize, used: &mut Vec<bool>, pairs: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == c.len() {
            let m = pairs.len();
            if m == 0 {
                return;
            }
            let mut chunks = 1;
            for w in pairs.windows(2) {
                if !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1) {
                    chunks += 1;
                }
            }
            if m > best.0 || (m == best.0 && chunks < best.1) {
                *best = (m, chunks);
            }
            return;
        }
        rec(c, r, i + 1, used, pairs, best);
        for j in 0..r.len() {
            if !used[j] && r[j] == c[i] {
                used[j] = true;
                pairs.push((i, j));
                rec(c, r, i + 1, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, usize::MAX);
    rec(c, r, 0, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
    if best.0 == 0 {
        (0, 0)
    } else {
        best
    }
}

pub fn oracle_meteor_pair(c: &[String], r: &[String]) -> f64 {
    let (m, ch) = oracle_alignment(c, r);
    if m == 0 {
        return 0.0;
    }
    let (p, rc) = (m as f64 / c.len() as f64, m as f64 / r.len() as f64);
    let f = 10.0 * p * rc / (rc + 9.0 * p);
    f * (1.0 - 0.5 * (ch as f64 / m as f64).powi(3))
}

pub fn oracle_meteor(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let s: f64 = cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| rs.iter().map(|r| oracle_meteor_pair(c, r)).fold(0.0, f64::max))
        .sum();
    s / cands.len() as f64
}

/// Dense TF-IDF vectors over the sorted list of every n-gram in the corpus.
pub fn oracle_cider_sentences(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Vec<f64> {
    let big_i = cands.len() as f64;
    let mut out = vec![0.0; cands.len()];
    for n in 1..=4 {
        let mut vocab: BTreeSet<Vec<String>> = BTreeSet::new();
        for c in cands {
            vocab.extend(grams(c, n));
        }
        for rs in refs {
            for r in rs {
                vocab.extend(grams(r, n));
            }
        }
        let vocab: Vec<Vec<String>> = vocab.into_iter().collect();
        let idf: Vec<f64> = vocab
            .iter()
            .map(|g| {
                let df = refs.iter().filter(|rs| rs.iter().any(|r| count(&grams(r, n), g) > 0)).count();
                (big_i / (1.0 + df as f64)).ln().max(0.0)
            })
            .collect();
        let vec_of = |s: &[String]| -> Vec<f64> {
            let gs = grams(s, n);
            vocab.iter().zip(&idf).map(|(g, w)| count(&gs, g) as f64 * w).collect()
        };
        let cos = |a: &[f64], b: &[f64]| {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
            }
        };
        for (i, (c, rs)) in cands.iter().zip(refs).enumerate() {
            let cv = vec_of(c);
            let s: f64 = rs.iter().map(|r| cos(&cv, &vec_of(r))).sum::<f64>() / rs.len() as f64;
            out[i] += 10.0 * s / 4.0;
        }
    }
    out
}

pub fn oracle_cider(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let s = oracle_cider_sentences(cands, refs);
    s.iter().sum::<f64>() / s.len() as f64
}

/// Random corpus over a tiny alphabet so n-gram collisions are frequent.
pub fn random_corpus(rng: &mut ChaCha8Rng) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    const WORDS: [&str; 5] = ["a", "b", "c", "d", "e"];
    let alpha = rng.gen_range(2..=WORDS.len());
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.gen_range(1..=7);
        (0..len).map(|_| WORDS[rng.gen_range(0..alpha)].to_string()).collect()
    };
    let images = rng.gen_range(1..=5);
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..images {
        cands.push(sentence(rng));
        let k = rng.gen_range(1..=4);
        refs.push((0..k).map(|_| sentence(rng)).collect());
    }
    (cands, refs)
}
