//! Building blocks recorded on an autodiff tape: parameter binding, affine
//! maps, attention, LSTM cells, positional encodings and dropout.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::ModelParams;
use super::ModelError;
use crate::tensor::{Scalar, Tape, Tensor, Var, MASK_NEG};

type Result<T> = std::result::Result<T, ModelError>;

/// A tape plus lazily bound parameters for one forward pass (or one batch).
pub struct Graph<'a, F: Scalar> {
    pub tape: Tape<F>,
    params: &'a ModelParams<F>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
    dropout: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, F: Scalar> Graph<'a, F> {
    /// Parameters are recorded as constants and dropout is off.
    pub fn inference(params: &'a ModelParams<F>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            trainable: false,
            dropout: 0.0,
            rng: None,
        }
    }

    /// Parameters are differentiable; dropout is active when `rng` is given and `dropout > 0`.
    pub fn training(params: &'a ModelParams<F>, dropout: f64, rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            trainable: true,
            dropout,
            rng,
        }
    }

    /// Records onto an existing tape, for example one owned by a gradient checker.
    pub fn from_tape(tape: Tape<F>, params: &'a ModelParams<F>) -> Self {
        Self {
            tape,
            params,
            bound: BTreeMap::new(),
            trainable: true,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn into_tape(self) -> Tape<F> {
        self.tape
    }

    /// Uses `var` for the named parameter instead of the stored tensor.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    /// Tape handle for the named parameter, binding it on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = if self.trainable {
            self.tape.param(t)
        } else {
            self.tape.constant_arc(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters touched so far, with their tape handles.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.tape.value(v)
    }

    /// `x W + b` with `W` stored `[in × out]`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add_row(y, b)?)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str, eps: f64) -> Result<Var> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.tape.layer_norm(x, g, b, F::of(eps))?)
    }

    /// Inverted dropout; the identity outside training.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let shape = self.tape.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let keep = F::of(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let m = self.tape.constant(Tensor::new(shape, mask)?);
        Ok(self.tape.mul(x, m)?)
    }

    /// Multi-head scaled dot-product attention with output projection.
    ///
    /// `mask` is added to the `[T_q × T_k]` scores of every head.
    pub fn attention(
        &mut self,
        q_in: Var,
        kv_in: Var,
        mask: Option<Var>,
        heads: usize,
        prefix: &str,
    ) -> Result<Var> {
        let e = self.value(q_in).last_dim();
        if heads == 0 || !e.is_multiple_of(heads) {
            return Err(ModelError::Config(format!("width {e} not divisible by {heads} heads")));
        }
        let (tq, tk) = (self.value(q_in).outer(), self.value(kv_in).outer());
        if let Some(m) = mask {
            if self.value(m).shape() != [tq, tk] {
                return Err(ModelError::Config(format!(
                    "mask {:?} for {tq}×{tk} scores",
                    self.value(m).shape()
                )));
            }
        }
        let q = self.linear(q_in, &format!("{prefix}.q"))?;
        let k = self.linear(kv_in, &format!("{prefix}.k"))?;
        let v = self.linear(kv_in, &format!("{prefix}.v"))?;
        let dh = e / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.tape.slice_cols(q, h * dh, dh)?,
                    self.tape.slice_cols(k, h * dh, dh)?,
                    self.tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let s = self.tape.matmul_nt(qh, kh)?;
            let mut s = self.tape.scale(s, scale);
            if let Some(m) = mask {
                s = self.tape.add(s, m)?;
            }
            let a = self.tape.softmax(s, 1)?;
            let a = self.dropout(a)?;
            outs.push(self.tape.matmul(a, vh)?);
        }
        let joined = if heads == 1 {
            outs[0]
        } else {
            self.tape.concat_cols(&outs)?
        };
        self.linear(joined, &format!("{prefix}.o"))
    }

    /// One LSTM step on `[1 × e]` rows with gate order input, forget, cell, output.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, prefix: &str) -> Result<(Var, Var)> {
        let w_ih = self.p(&format!("{prefix}.w_ih"))?;
        let w_hh = self.p(&format!("{prefix}.w_hh"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        lstm_cell_step(&mut self.tape, x, h, c, w_ih, w_hh, b)
    }
}

/// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')` with gates from `x W_ih + h W_hh + b`.
pub fn lstm_cell_step<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    h: Var,
    c: Var,
    w_ih: Var,
    w_hh: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let hidden = tape.value(h).last_dim();
    let xi = tape.matmul(x, w_ih)?;
    let hh = tape.matmul(h, w_hh)?;
    let pre = tape.add(xi, hh)?;
    let pre = tape.add_row(pre, b)?;
    let gate = |tape: &mut Tape<F>, k: usize| tape.slice_cols(pre, k * hidden, hidden);
    let (i, f, g, o) = (gate(tape, 0)?, gate(tape, 1)?, gate(tape, 2)?, gate(tape, 3)?);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c2 = tape.add(fc, ig)?;
    let tc = tape.tanh(c2);
    let h2 = tape.mul(o, tc)?;
    Ok((h2, c2))
}

/// Sinusoidal encodings `[len × width]`: sin on even columns, cos on odd.
pub fn positional_encoding<F: Scalar>(len: usize, width: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(len * width);
    for pos in 0..len {
        for j in 0..width {
            let i2 = (j - j % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / width as f64);
            data.push(F::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, width], data).expect("sizes agree")
}

/// Additive mask hiding future positions: row `t` sees columns `0..=t`.
pub fn causal_mask<F: Scalar>(len: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); len * len];
    for t in 0..len {
        for j in t + 1..len {
            data[t * len + j] = F::of(MASK_NEG);
        }
    }
    Tensor::new(vec![len, len], data).expect("sizes agree")
}
