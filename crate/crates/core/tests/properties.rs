mod common;

use std::collections::BTreeSet;

use common::*;
use imcap::data::{decode_features, encode_features, FeatureEntry};
use imcap::decode::{beam_search_decode, greedy_decode, BoundCaptioner};
use imcap::metrics::{bleu4_corpus, cider_corpus, evaluate_corpus, meteor_corpus};
use imcap::model::{read_checkpoint, write_checkpoint, AdapterKind, Captioner, DecoderKind};
use imcap::tensor::Tensor;
use imcap::text::{build_vocab, decode, encode, EOS, NUM_SPECIAL, SOS};
use imcap::train::split_dataset;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Corpus = (Vec<Vec<String>>, Vec<Vec<Vec<String>>>);

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 1..9)
        .prop_map(|w| w.into_iter().map(String::from).collect())
}

fn corpus() -> impl Strategy<Value = Corpus> {
    prop::collection::vec((sentence(), prop::collection::vec(sentence(), 1..5)), 1..7)
        .prop_map(|pairs| pairs.into_iter().unzip())
}

fn scores(c: &Corpus) -> [f64; 3] {
    [
        bleu4_corpus(&c.0, &c.1).unwrap(),
        meteor_corpus(&c.0, &c.1).unwrap(),
        cider_corpus(&c.0, &c.1).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_ranges(c in corpus()) {
        let [b, m, d] = scores(&c);
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert!(d >= 0.0 && d.is_finite());
    }

    #[test]
    fn metrics_are_bit_deterministic(c in corpus()) {
        let a = scores(&c).map(f64::to_bits);
        let b = scores(&c).map(f64::to_bits);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn corpus_scores_ignore_pair_order(c in corpus(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..c.0.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Corpus = (
            order.iter().map(|&i| c.0[i].clone()).collect(),
            order.iter().map(|&i| c.1[i].clone()).collect(),
        );
        for (x, y) in scores(&c).iter().zip(scores(&shuffled)) {
            prop_assert!((x - y).abs() < 1e-12, "{} vs {}", x, y);
        }
    }

    #[test]
    fn bleu_and_meteor_ignore_token_renaming(c in corpus(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let words = ["a", "b", "c", "d", "e", "f"];
        let mut renamed: Vec<String> = ["u", "v", "w", "x", "y", "z"].iter().map(|s| s.to_string()).collect();
        renamed.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let map = |s: &Vec<String>| -> Vec<String> {
            s.iter().map(|w| renamed[words.iter().position(|x| x == w).unwrap()].clone()).collect()
        };
        let r: Corpus = (c.0.iter().map(map).collect(), c.1.iter().map(|rs| rs.iter().map(map).collect()).collect());
        prop_assert_eq!(bleu4_corpus(&c.0, &c.1).unwrap(), bleu4_corpus(&r.0, &r.1).unwrap());
        prop_assert_eq!(meteor_corpus(&c.0, &c.1).unwrap(), meteor_corpus(&r.0, &r.1).unwrap());
    }

    #[test]
    fn report_fields_equal_individual_metrics(c in corpus()) {
        let ids: Vec<String> = (0..c.0.len()).map(|i| format!("img{i}")).collect();
        let rep = evaluate_corpus(&ids, &c.0, &c.1).unwrap();
        let [b, m, d] = scores(&c);
        prop_assert_eq!(rep.bleu4, b);
        prop_assert_eq!(rep.meteor, m);
        prop_assert!((rep.cider - d).abs() < 1e-12);
        prop_assert_eq!(rep.per_image.len(), c.0.len());
    }

    #[test]
    fn metrics_match_brute_force(c in corpus()) {
        let [b, m, d] = scores(&c);
        prop_assert!((b - oracle_bleu4(&c.0, &c.1)).abs() < 1e-9);
        prop_assert!((m - oracle_meteor(&c.0, &c.1)).abs() < 1e-9);
        prop_assert!((d - oracle_cider(&c.0, &c.1)).abs() < 1e-9);
    }

    #[test]
    fn split_is_a_partition(n in 20usize..200, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
        let s = split_dataset(&ids, seed).unwrap();
        prop_assert_eq!(s.train.len(), n * 85 / 100);
        prop_assert_eq!(s.val.len(), n * 10 / 100);
        let all: BTreeSet<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(split_dataset(&ids, seed).unwrap(), s);
    }

    #[test]
    fn feature_files_round_trip_bit_exactly(
        mats in prop::collection::vec((1usize..4, 1usize..5, any::<u64>()), 1..5)
    ) {
        use rand::Rng;
        let entries: Vec<FeatureEntry> = mats
            .iter()
            .enumerate()
            .map(|(i, &(r, c, seed))| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data = (0..r * c).map(|_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff)).collect();
                FeatureEntry::new(format!("id{i}"), Tensor::new(vec![r, c], data).unwrap())
            })
            .collect();
        let bytes = encode_features(&entries).unwrap();
        let back = decode_features(&bytes).unwrap();
        prop_assert_eq!(back.len(), entries.len());
        for (a, b) in back.iter().zip(&entries) {
            prop_assert_eq!(&a.id, &b.id);
            let (x, y): (Vec<u32>, Vec<u32>) = (
                a.matrix.data().iter().map(|v| v.to_bits()).collect(),
                b.matrix.data().iter().map(|v| v.to_bits()).collect(),
            );
            prop_assert_eq!(x, y);
        }
        prop_assert_eq!(encode_features(&back).unwrap(), bytes);
    }

    #[test]
    fn text_encode_decode_round_trip(words in prop::collection::vec("[a-z]{1,4}", 0..12)) {
        let vocab = build_vocab(std::slice::from_ref(&words), 1);
        let seq = encode(&words, &vocab, 40);
        prop_assert_eq!(seq.ids.first(), Some(&SOS));
        prop_assert_eq!(seq.ids.last(), Some(&EOS));
        prop_assert_eq!(decode(&seq.ids, &vocab).unwrap(), words.join(" "));
        prop_assert!(seq.ids[1..seq.ids.len() - 1].iter().all(|&i| i as usize >= NUM_SPECIAL));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), transformer in any::<bool>()) {
        let decoder = if transformer { DecoderKind::Transformer } else { DecoderKind::Lstm };
        let config = tiny(decoder, AdapterKind::Single, 9);
        let model = Captioner::<f32>::new(config.clone(), seed).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &config, None, &model.params).unwrap();
        let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(&back.architecture, &config);
        prop_assert_eq!(&back.params, &model.params);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back.architecture, None, &back.params).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn width_one_beam_is_greedy(seed in any::<u64>(), transformer in any::<bool>(), max_len in 2usize..7) {
        let decoder = if transformer { DecoderKind::Transformer } else { DecoderKind::Lstm };
        let config = tiny(decoder, AdapterKind::Single, 11);
        let model = random_model(config.clone(), seed);
        let streams = streams_for(&config, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let bound = BoundCaptioner::new(&model, &streams).unwrap();
        prop_assert_eq!(
            beam_search_decode(&bound, max_len, 1).unwrap().ids,
            greedy_decode(&bound, max_len).unwrap().ids
        );
    }
}
