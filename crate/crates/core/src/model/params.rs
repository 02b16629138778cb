//! Parameter manifests and seeded initialization.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{AdapterKind, ArchitectureConfig, DecoderKind};
use super::ModelError;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with `fan_in` = first dimension.
    Uniform,
    Zeros,
    Ones,
    /// Zeros except the forget-gate quarter, which is set to +1.
    LstmBias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(spec(format!("{prefix}.w"), &[fan_in, fan_out], Init::Uniform));
    out.push(spec(format!("{prefix}.b"), &[fan_out], Init::Zeros));
}

fn attention(out: &mut Vec<ParamSpec>, prefix: &str, e: usize) {
    for proj in ["q", "k", "v", "o"] {
        linear(out, &format!("{prefix}.{proj}"), e, e);
    }
}

fn layer_norm(out: &mut Vec<ParamSpec>, prefix: &str, e: usize) {
    out.push(spec(format!("{prefix}.g"), &[e], Init::Ones));
    out.push(spec(format!("{prefix}.b"), &[e], Init::Zeros));
}

/// Every parameter of the architecture, in initialization order.
pub fn manifest(config: &ArchitectureConfig) -> Vec<ParamSpec> {
    let e = config.embed_size;
    let mut out = Vec::new();
    match config.adapter {
        AdapterKind::Single => linear(&mut out, "adapter", config.feature_dims[0], e),
        AdapterKind::Detection => {
            linear(&mut out, "adapter", config.max_boxes * config.feature_dims[0], e)
        }
        AdapterKind::Stacked => {
            linear(&mut out, "adapter.a", config.feature_dims[0], e);
            linear(&mut out, "adapter.b", config.feature_dims[1], e);
        }
    }
    out.push(spec("embed", &[config.vocab_size, e], Init::Uniform));
    for l in 0..config.num_layers {
        match config.decoder {
            DecoderKind::Transformer => {
                attention(&mut out, &format!("layer{l}.self"), e);
                layer_norm(&mut out, &format!("layer{l}.ln1"), e);
                attention(&mut out, &format!("layer{l}.cross"), e);
                layer_norm(&mut out, &format!("layer{l}.ln2"), e);
                linear(&mut out, &format!("layer{l}.ffn1"), e, config.ffn_size);
                linear(&mut out, &format!("layer{l}.ffn2"), config.ffn_size, e);
                layer_norm(&mut out, &format!("layer{l}.ln3"), e);
            }
            DecoderKind::Lstm => {
                out.push(spec(format!("lstm{l}.w_ih"), &[e, 4 * e], Init::Uniform));
                out.push(spec(format!("lstm{l}.w_hh"), &[e, 4 * e], Init::Uniform));
                out.push(spec(format!("lstm{l}.b"), &[4 * e], Init::LstmBias));
            }
        }
    }
    linear(&mut out, "head", e, config.vocab_size);
    out
}

/// Parameters whose gradient is identically zero for this configuration.
///
/// Key biases shift every attention score in a row by the same amount, and a
/// single encoder token makes cross-attention weights constant.
pub fn provably_unused(config: &ArchitectureConfig, encoder_rows: usize) -> Vec<String> {
    let mut names = Vec::new();
    if config.decoder == DecoderKind::Transformer {
        for l in 0..config.num_layers {
            names.push(format!("layer{l}.self.k.b"));
            names.push(format!("layer{l}.cross.k.b"));
            if encoder_rows == 1 {
                for n in ["q.w", "q.b", "k.w"] {
                    names.push(format!("layer{l}.cross.{n}"));
                }
            }
        }
    }
    names
}

/// Named parameter tensors. Storage is shared with autodiff tapes through `Arc`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    tensors: BTreeMap<String, Arc<Tensor<F>>>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<F>>) -> Self {
        Self {
            tensors: tensors.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor<F>>, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>, ModelError> {
        self.tensors
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        self.tensors.insert(name.into(), Arc::new(value));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Tensor<F>>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }

    /// Checks names, shapes and finiteness against the manifest.
    pub fn validate(&self, config: &ArchitectureConfig) -> Result<(), ModelError> {
        let specs = manifest(config);
        if specs.len() != self.tensors.len() {
            let expected: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            if let Some(extra) = self.tensors.keys().find(|k| !expected.contains(&k.as_str())) {
                return Err(ModelError::UnexpectedParam(extra.clone()));
            }
        }
        for s in &specs {
            let t = self.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: s.name.clone(),
                    expected: s.shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(ModelError::NonFinite(s.name.clone()));
            }
        }
        Ok(())
    }
}

/// Seeded initialization following the manifest.
pub fn init_params<F: Scalar>(config: &ArchitectureConfig, seed: u64) -> Result<ModelParams<F>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for s in manifest(config) {
        let n: usize = s.shape.iter().product();
        let data: Vec<F> = match s.init {
            Init::Uniform => {
                let bound = 1.0 / (s.shape[0] as f64).sqrt();
                (0..n).map(|_| F::of(rng.gen_range(-bound..bound))).collect()
            }
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::LstmBias => {
                let h = n / 4;
                (0..n)
                    .map(|i| if (h..2 * h).contains(&i) { F::one() } else { F::zero() })
                    .collect()
            }
        };
        tensors.insert(s.name, Tensor::new(s.shape, data)?);
    }
    Ok(ModelParams::from_map(tensors))
}
