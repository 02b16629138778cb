use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optim::{clip_global_norm, Grads, Optimizer};
use super::{sample_reference, EvalMethod, TrainConfig, TrainError};
use crate::data::CaptionDataset;
use crate::decode::{beam_search_decode, greedy_decode, BoundCaptioner};
use crate::metrics::{evaluate_captions, MetricReport};
use crate::model::{teacher_forced_loss, Captioner, Graph, ModelError};
use crate::tensor::{Scalar, Tensor};
use crate::text::{decode, encode, tokenize, TokenId, Vocabulary, PAD};

const SHUFFLE_STREAM: u64 = 1;
const REFERENCE_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

/// One image ready for training or validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<F> {
    pub id: String,
    pub streams: Vec<Tensor<F>>,
    /// Raw reference captions, used for metrics.
    pub references: Vec<String>,
    /// The references as `SOS ... EOS` id sequences, used as training targets.
    pub sequences: Vec<Vec<TokenId>>,
}

/// Examples for `ids` in the given order.
pub fn build_examples<F: Scalar>(
    dataset: &CaptionDataset,
    ids: &[String],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Example<F>>, TrainError> {
    ids.iter()
        .map(|id| {
            let references = dataset
                .captions
                .get(id)
                .ok_or_else(|| TrainError::Config(format!("unknown image id {id}")))?
                .clone();
            let streams = dataset
                .features(id)
                .ok_or_else(|| TrainError::Config(format!("no features for {id}")))?
                .iter()
                .map(Tensor::cast)
                .collect();
            let sequences = references
                .iter()
                .map(|r| encode(&tokenize(r), vocab, max_len).ids)
                .collect();
            Ok(Example {
                id: id.clone(),
                streams,
                references,
                sequences,
            })
        })
        .collect()
}

/// Runs `f` over `items` on up to `threads` scoped threads. Output order matches input order.
pub(crate) fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

struct ExampleGrad<F> {
    loss: f64,
    tokens: usize,
    grads: Grads<F>,
}

fn example_grad<F: Scalar>(
    model: &Captioner<F>,
    streams: &[Tensor<F>],
    ids: &[TokenId],
    dropout_seed: u64,
) -> Result<ExampleGrad<F>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut g = Graph::training(&model.params, model.config.dropout, Some(&mut rng));
    let feats: Vec<_> = streams.iter().map(|s| g.input(s.clone())).collect();
    let loss = teacher_forced_loss(&mut g, &model.config, &feats, ids)?;
    let value = g.value(loss).data()[0].as_f64();
    let bound = g.bound().clone();
    let mut tape = g.into_tape();
    let mut back = tape.backward(loss).map_err(ModelError::from)?;
    let grads = bound
        .into_iter()
        .filter_map(|(name, v)| back.take(v).map(|t| (name, t)))
        .collect();
    Ok(ExampleGrad {
        loss: value,
        tokens: ids[1..].iter().filter(|&&t| t != PAD).count(),
        grads,
    })
}

/// Owns a model under training, its optimizer state and the run's random streams.
pub struct Trainer<F: Scalar> {
    pub model: Captioner<F>,
    pub config: TrainConfig,
    optimizer: Optimizer,
    shuffle_rng: ChaCha8Rng,
    reference_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    epochs_done: usize,
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: Captioner<F>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate_loop()?;
        Ok(Self {
            model,
            optimizer: Optimizer::new(config.optimizer),
            shuffle_rng: stream(config.seed, SHUFFLE_STREAM),
            reference_rng: stream(config.seed, REFERENCE_STREAM),
            dropout_rng: stream(config.seed, DROPOUT_STREAM),
            epochs_done: 0,
            config,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// One pass over shuffled batches with one gradient step per batch.
    /// Returns the token-weighted mean loss.
    pub fn train_epoch(&mut self, train: &[Example<F>]) -> Result<f64, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptySet("training"));
        }
        let epoch = self.epochs_done + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let items: Vec<(&Example<F>, &[TokenId], u64)> = chunk
                .iter()
                .map(|&i| {
                    let ex = &train[i];
                    let r = sample_reference(ex.sequences.len(), self.config.reference_sampling, &mut self.reference_rng);
                    (ex, ex.sequences[r].as_slice(), self.dropout_rng.gen::<u64>())
                })
                .collect();
            let (l, n) = self.step(&items).map_err(|e| match e {
                TrainError::NonFiniteLoss { .. } => TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    images: items.iter().map(|(ex, _, _)| ex.id.clone()).collect(),
                },
                other => other,
            })?;
            loss_sum += l;
            token_sum += n;
        }
        self.epochs_done = epoch;
        Ok(loss_sum / token_sum.max(1) as f64)
    }

    /// Accumulates per-example gradients in batch order, so the result does
    /// not depend on the thread count. Returns (summed token loss, tokens).
    fn step(&mut self, items: &[(&Example<F>, &[TokenId], u64)]) -> Result<(f64, usize), TrainError> {
        let total_tokens: usize = items.iter().map(|(_, ids, _)| ids.len().saturating_sub(1)).sum();
        let mut acc: Grads<F> = BTreeMap::new();
        let mut loss_sum = 0.0;
        for group in items.chunks(self.config.threads.max(1)) {
            let model = &self.model;
            let results = parallel_map(group, self.config.threads, |(ex, ids, seed)| {
                example_grad(model, &ex.streams, ids, *seed)
            });
            for r in results {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch: 0,
                        batch: 0,
                        images: vec![],
                    });
                }
                loss_sum += r.loss * r.tokens as f64;
                let w = F::of(r.tokens as f64 / total_tokens.max(1) as f64);
                for (name, g) in r.grads {
                    match acc.get_mut(&name) {
                        Some(a) => {
                            for (x, &d) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += d * w;
                            }
                        }
                        None => {
                            acc.insert(name, g.map(|d| d * w));
                        }
                    }
                }
            }
        }
        clip_global_norm(&mut acc, self.config.clip_norm);
        self.optimizer.step(&mut self.model.params, &acc, self.config.learning_rate)?;
        Ok((loss_sum, total_tokens))
    }
}

/// Decoded captions and their scores against every reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub method: EvalMethod,
    pub captions: BTreeMap<String, String>,
    pub report: MetricReport,
    pub seconds: f64,
}

/// Decodes every example with `method` and scores the captions.
pub fn validate<F: Scalar>(
    model: &Captioner<F>,
    examples: &[Example<F>],
    vocab: &Vocabulary,
    method: EvalMethod,
    max_len: usize,
    threads: usize,
) -> Result<Validation, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let start = Instant::now();
    let decoded = parallel_map(examples, threads, |ex| -> Result<String, TrainError> {
        let bound = BoundCaptioner::new(model, &ex.streams)?;
        let seq = match method {
            EvalMethod::Greedy => greedy_decode(&bound, max_len)?,
            EvalMethod::Beam3 => beam_search_decode(&bound, max_len, method.beam_width())?,
        };
        Ok(decode(&seq.ids, vocab)?)
    });
    let mut captions = BTreeMap::new();
    let mut references = BTreeMap::new();
    for (ex, cap) in examples.iter().zip(decoded) {
        captions.insert(ex.id.clone(), cap?);
        references.insert(ex.id.clone(), ex.references.clone());
    }
    let report = evaluate_captions(&captions, &references)?;
    Ok(Validation {
        method,
        captions,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}
