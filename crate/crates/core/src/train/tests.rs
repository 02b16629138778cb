use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{gen_synthetic, CaptionDataset, SyntheticConfig};
use crate::metrics::evaluate_captions;
use crate::model::{AdapterKind, ArchitectureConfig, Captioner, DecoderKind, ModelParams};
use crate::tensor::Tensor;
use crate::text::{build_vocab, tokenize, Vocabulary};

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("im{i:03}")).collect()
}

#[test]
fn split_sizes_follow_floor_arithmetic() {
    for (n, want) in [(100, (85, 10, 5)), (20, (17, 2, 1)), (33, (28, 3, 2))] {
        let s = split_dataset(&ids(n), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), want);
    }
    assert!(matches!(split_dataset(&ids(19), 1), Err(TrainError::TooFewImages(19))));
}

#[test]
fn split_is_seeded_and_independent_of_input_order() {
    let a = split_dataset(&ids(50), 4).unwrap();
    let mut rev = ids(50);
    rev.reverse();
    assert_eq!(a, split_dataset(&rev, 4).unwrap());
    assert_ne!(a, split_dataset(&ids(50), 5).unwrap());
}

#[test]
fn duplicate_ids_cannot_be_split() {
    let mut v = ids(25);
    v[3] = v[4].clone();
    assert!(split_dataset(&v, 0).is_err());
}

#[test]
fn single_reference_is_always_chosen() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        assert_eq!(sample_reference(1, ReferenceSampling::Uniform, &mut rng), 0);
    }
    assert_eq!(sample_reference(5, ReferenceSampling::First, &mut rng), 0);
}

#[test]
fn reference_draws_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [0usize; 5];
    for _ in 0..10_000 {
        counts[sample_reference(5, ReferenceSampling::Uniform, &mut rng)] += 1;
    }
    for c in counts {
        assert!((1800..=2200).contains(&c), "{counts:?}");
    }
    // Pearson statistic against the uniform expectation; 4 d.o.f. critical value at 0.001 is 18.47.
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - 2000.0).powi(2) / 2000.0).sum();
    assert!(chi2 < 18.47, "{chi2}");
}

#[test]
fn reference_draws_are_reproducible() {
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..50)
            .map(|_| sample_reference(5, ReferenceSampling::Uniform, &mut rng))
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));
}

fn one_param(v: f64) -> ModelParams<f64> {
    let mut p = ModelParams::from_map(BTreeMap::new());
    p.insert("w", Tensor::from_f64(&[1, 2], &[v, v]).unwrap());
    p
}

fn grad(v: f64) -> Grads<f64> {
    BTreeMap::from([("w".to_string(), Tensor::from_f64(&[1, 2], &[v, v]).unwrap())])
}

#[test]
fn sgd_step_by_hand() {
    let mut p = one_param(1.0);
    sgd_step(&mut p, &grad(2.0), 0.1).unwrap();
    assert!((p.get("w").unwrap().data()[0] - 0.8).abs() < 1e-15);
    let before = p.clone();
    sgd_step(&mut p, &grad(0.0), 0.1).unwrap();
    assert_eq!(p, before);
}

#[test]
fn adam_first_step_moves_by_lr() {
    for g in [0.3, -2.0, 17.0] {
        let mut p = one_param(1.0);
        let mut st = AdamState::default();
        adam_step(&mut p, &grad(g), 1e-3, AdamHyper::default(), &mut st).unwrap();
        let moved = 1.0 - p.get("w").unwrap().data()[0];
        assert!((moved - 1e-3 * g.signum()).abs() < 1e-9, "{moved}");
        assert_eq!(st.step, 1);
    }
    let mut p = one_param(1.0);
    let before = p.clone();
    adam_step(&mut p, &grad(0.0), 1e-3, AdamHyper::default(), &mut AdamState::default()).unwrap();
    assert_eq!(p, before);
}

#[test]
fn adam_matches_hand_recurrence_over_steps() {
    let h = AdamHyper::default();
    let mut p = one_param(0.5);
    let mut st = AdamState::default();
    let (mut theta, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    for t in 1..=6 {
        let g = 0.1 * t as f64 - 0.25;
        adam_step(&mut p, &grad(g), 0.01, h, &mut st).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        theta -= 0.01 * mh / (vh.sqrt() + 1e-8);
    }
    assert!((p.get("w").unwrap().data()[1] - theta).abs() < 1e-14);
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let mut p = one_param(1.0);
    let err = sgd_step(&mut p, &grad(f64::NAN), 0.1).unwrap_err();
    assert!(matches!(&err, TrainError::NonFiniteGradient(n) if n == "w"));
    let err = adam_step(&mut p, &grad(f64::INFINITY), 0.1, AdamHyper::default(), &mut AdamState::default());
    assert!(matches!(err, Err(TrainError::NonFiniteGradient(_))));
}

#[test]
fn clipping_rescales_to_the_limit() {
    let mut g = grad(3.0);
    g.insert("b".into(), Tensor::from_f64(&[1], &[4.0 * 2f64.sqrt()]).unwrap());
    // norm = sqrt(9 + 9 + 32) = sqrt(50)
    let n = clip_global_norm(&mut g, 1.0);
    assert!((n - 50f64.sqrt()).abs() < 1e-12);
    let after: f64 = g.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    assert!((after - 1.0).abs() < 1e-12);
    let mut small = grad(0.1);
    let copy = small.clone();
    clip_global_norm(&mut small, 5.0);
    assert_eq!(small, copy);
}

#[test]
fn config_defaults_and_grid_checks() {
    let c: TrainConfig = serde_json::from_str(
        r#"{"batch_size": 128, "learning_rate": 0.0005, "embed_size": 512, "num_layers": 4}"#,
    )
    .unwrap();
    assert_eq!((c.epochs, c.optimizer, c.max_len), (50, OptimizerKind::Adam, 30));
    c.validate().unwrap();
    TrainConfig::default().validate().unwrap();
    for bad in [
        TrainConfig { num_layers: 3, ..Default::default() },
        TrainConfig { learning_rate: 1e-2, ..Default::default() },
        TrainConfig { epochs: 0, ..Default::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    assert!(serde_json::from_str::<TrainConfig>(r#"{"batch_size": 64}"#).is_err());
}

#[test]
fn validation_schedule() {
    let c = TrainConfig { epochs: 12, ..Default::default() };
    let got: Vec<_> = (1..=12).map(|e| c.eval_for_epoch(e)).collect();
    assert_eq!(got[0], Some(EvalMethod::Greedy));
    assert_eq!(got[4], Some(EvalMethod::Beam3));
    assert_eq!(got[9], Some(EvalMethod::Beam3));
    assert_eq!(got[11], Some(EvalMethod::Beam3));
    let sparse = TrainConfig { epochs: 7, validate_every: 3, beam_every: 0, ..Default::default() };
    let got: Vec<_> = (1..=7).map(|e| sparse.eval_for_epoch(e)).collect();
    assert_eq!(got, vec![None, None, Some(EvalMethod::Greedy), None, None, Some(EvalMethod::Greedy), Some(EvalMethod::Beam3)]);
}

struct Toy {
    vocab: Vocabulary,
    examples: Vec<Example<f64>>,
    arch: ArchitectureConfig,
}

fn toy(n: usize, decoder: DecoderKind) -> Toy {
    let d = gen_synthetic(&SyntheticConfig { vocab_size: 8, feature_dim: 6, ..SyntheticConfig::new(n, 2) }).unwrap();
    let ds = CaptionDataset::new(d.captions, d.streams, false).unwrap();
    let toks: Vec<Vec<String>> = ds.captions.values().flatten().map(|c| tokenize(c)).collect();
    let vocab = build_vocab(&toks, 1);
    let examples = build_examples(&ds, &ds.ids(), &vocab, 16).unwrap();
    let mut arch = ArchitectureConfig::new(decoder, AdapterKind::Single, 16, 1, vocab.len(), vec![6]);
    arch.num_heads = 2;
    arch.ffn_size = 24;
    arch.max_len = 16;
    arch.dropout = 0.0;
    Toy { vocab, examples, arch }
}

fn loop_config(lr: f64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        learning_rate: lr,
        embed_size: 16,
        max_len: 16,
        reference_sampling: ReferenceSampling::First,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_leaves_params_bit_identical() {
    for opt in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let t = toy(6, DecoderKind::Transformer);
        let model = Captioner::<f64>::new(t.arch.clone(), 1).unwrap();
        let before = model.params.clone();
        let mut tr = Trainer::new(model, TrainConfig { optimizer: opt, ..loop_config(0.0) }).unwrap();
        tr.train_epoch(&t.examples).unwrap();
        assert_eq!(tr.model.params, before);
        assert_eq!(tr.epochs_done(), 1);
    }
}

#[test]
fn repeated_single_example_loss_strictly_decreases() {
    for decoder in [DecoderKind::Transformer, DecoderKind::Lstm] {
        let t = toy(1, decoder);
        let model = Captioner::<f64>::new(t.arch.clone(), 3).unwrap();
        let mut tr = Trainer::new(model, loop_config(1e-2)).unwrap();
        let losses: Vec<f64> = (0..5).map(|_| tr.train_epoch(&t.examples).unwrap()).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{decoder:?} {losses:?}");
    }
}

#[test]
fn epoch_loss_before_training_is_near_ln_v() {
    let t = toy(8, DecoderKind::Transformer);
    let model = Captioner::<f64>::new(t.arch.clone(), 5).unwrap();
    let mut tr = Trainer::new(model, TrainConfig { batch_size: 64, ..loop_config(0.0) }).unwrap();
    let loss = tr.train_epoch(&t.examples).unwrap();
    let ln_v = (t.vocab.len() as f64).ln();
    assert!(loss > 0.85 * ln_v && loss < 1.15 * ln_v, "{loss} vs {ln_v}");
}

#[test]
fn thread_count_does_not_change_results() {
    let t = toy(7, DecoderKind::Transformer);
    let run = |threads| {
        let model = Captioner::<f32>::new(t.arch.clone(), 9).unwrap();
        let ex: Vec<Example<f32>> = t
            .examples
            .iter()
            .map(|e| Example {
                id: e.id.clone(),
                streams: e.streams.iter().map(Tensor::cast).collect(),
                references: e.references.clone(),
                sequences: e.sequences.clone(),
            })
            .collect();
        let mut tr = Trainer::new(
            model,
            TrainConfig { threads, reference_sampling: ReferenceSampling::Uniform, ..loop_config(1e-3) },
        )
        .unwrap();
        let l: Vec<u64> = (0..2).map(|_| tr.train_epoch(&ex).unwrap().to_bits()).collect();
        (l, tr.model.params)
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn memorized_single_image_scores_bleu_one() {
    let t = toy(1, DecoderKind::Transformer);
    let model = Captioner::<f64>::new(t.arch.clone(), 4).unwrap();
    let mut tr = Trainer::new(model, loop_config(1e-2)).unwrap();
    for _ in 0..150 {
        tr.train_epoch(&t.examples).unwrap();
    }
    let v = validate(&tr.model, &t.examples, &t.vocab, EvalMethod::Greedy, 16, 1).unwrap();
    assert_eq!(v.captions[&t.examples[0].id], t.examples[0].references[0]);
    assert!((v.report.bleu4 - 1.0).abs() < 1e-12, "{}", v.report.bleu4);
}

#[test]
fn validation_equals_direct_evaluation_and_is_deterministic() {
    let t = toy(5, DecoderKind::Lstm);
    let model = Captioner::<f64>::new(t.arch.clone(), 8).unwrap();
    let a = validate(&model, &t.examples, &t.vocab, EvalMethod::Beam3, 16, 1).unwrap();
    let refs: BTreeMap<String, Vec<String>> =
        t.examples.iter().map(|e| (e.id.clone(), e.references.clone())).collect();
    assert_eq!(evaluate_captions(&a.captions, &refs).unwrap(), a.report);
    let b = validate(&model, &t.examples, &t.vocab, EvalMethod::Beam3, 16, 2).unwrap();
    assert_eq!((a.captions, a.report), (b.captions, b.report));
    assert!(validate(&model, &[], &t.vocab, EvalMethod::Greedy, 16, 1).is_err());
}

#[test]
fn train_on_tracks_best_and_final() {
    let t = toy(6, DecoderKind::Transformer);
    let model = Captioner::<f64>::new(t.arch.clone(), 2).unwrap();
    let cfg = TrainConfig { epochs: 4, beam_every: 2, ..loop_config(1e-2) };
    let dir = tempfile::tempdir().unwrap();
    let (o, _) = train_on(model, &t.vocab, &t.examples[..4], &t.examples[4..], &cfg, Some(dir.path())).unwrap();
    assert_eq!(o.records.len(), 4);
    assert_eq!(o.records[3].eval_method, Some(EvalMethod::Beam3));
    assert!(o.records.iter().all(|r| r.train_loss.is_finite()));
    for r in &o.records {
        for m in [r.val_bleu4, r.val_meteor].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&m));
        }
        assert!(r.val_cider.unwrap() >= 0.0);
    }
    let best = o.records.iter().filter_map(|r| r.val_bleu4).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(o.best_bleu4, best);
    assert_eq!(o.records[o.best_epoch - 1].val_bleu4, Some(best));
    for f in ["epochs.jsonl", "timing.jsonl", "best.ickp", "final.ickp"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back: Vec<EpochRecord> = crate::data::read_jsonl(&dir.path().join("epochs.jsonl")).unwrap();
    assert_eq!(back, o.records);
}
