use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::ModelParams;
use crate::tensor::{Scalar, Tensor};

/// Gradient per parameter name.
pub type Grads<F> = BTreeMap<String, Tensor<F>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step count and first/second moments, kept in f64 whatever the parameter precision.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

fn check_finite<F: Scalar>(grads: &Grads<F>) -> Result<(), TrainError> {
    match grads.iter().find(|(_, g)| !g.is_finite()) {
        Some((name, _)) => Err(TrainError::NonFiniteGradient(name.clone())),
        None => Ok(()),
    }
}

fn target<'a, F: Scalar>(
    params: &'a mut ModelParams<F>,
    name: &str,
    grad: &Tensor<F>,
) -> Result<&'a mut Tensor<F>, TrainError> {
    let p = params.get_mut(name)?;
    if p.shape() != grad.shape() {
        return Err(TrainError::Config(format!(
            "gradient for {name} has shape {:?}, parameter {:?}",
            grad.shape(),
            p.shape()
        )));
    }
    Ok(p)
}

/// `θ ← θ − lr·g` for every parameter with a gradient.
pub fn sgd_step<F: Scalar>(params: &mut ModelParams<F>, grads: &Grads<F>, lr: f64) -> Result<(), TrainError> {
    check_finite(grads)?;
    for (name, g) in grads {
        let p = target(params, name, g)?;
        for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *x = F::of(x.as_f64() - lr * d.as_f64());
        }
    }
    Ok(())
}

/// Bias-corrected Adam. Parameters without a gradient entry are left alone.
pub fn adam_step<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: &Grads<F>,
    lr: f64,
    hyper: AdamHyper,
    state: &mut AdamState,
) -> Result<(), TrainError> {
    check_finite(grads)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (name, g) in grads {
        let p = target(params, name, g)?;
        let n = g.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (((x, &d), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let d = d.as_f64();
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * d;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * d * d;
            let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + hyper.eps);
            *x = F::of(x.as_f64() - update);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut Grads<F>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x = F::of(x.as_f64() * s);
            }
        }
    }
    norm
}

/// The configured optimizer with its state.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam(AdamHyper, AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(AdamHyper::default(), AdamState::default()),
        }
    }

    pub fn step<F: Scalar>(&mut self, params: &mut ModelParams<F>, grads: &Grads<F>, lr: f64) -> Result<(), TrainError> {
        match self {
            Optimizer::Sgd => sgd_step(params, grads, lr),
            Optimizer::Adam(h, s) => adam_step(params, grads, lr, *h, s),
        }
    }
}
