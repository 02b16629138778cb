//! Feature adapters and the two decoder families.

use super::config::{AdapterKind, ArchitectureConfig, DecoderKind, LAYER_NORM_EPS};
use super::layers::{causal_mask, positional_encoding, Graph};
use super::ModelError;
use crate::tensor::{Scalar, Tensor, Var};
use crate::text::TokenId;

type Result<T> = std::result::Result<T, ModelError>;

fn check_dim<F: Scalar>(g: &Graph<F>, x: Var, stream: usize, expected: usize) -> Result<()> {
    let t = g.value(x);
    if t.rank() != 2 || t.last_dim() != expected {
        return Err(ModelError::FeatureDim {
            stream,
            expected,
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Checks box rows `(x, y, w, h, one-hot class)`.
pub fn validate_boxes<F: Scalar>(boxes: &Tensor<F>, max_boxes: usize) -> Result<()> {
    let (rows, cols) = boxes.dims2("detection").map_err(ModelError::Tensor)?;
    if rows > max_boxes {
        return Err(ModelError::Detection(format!("{rows} boxes exceed max_boxes {max_boxes}")));
    }
    for r in 0..rows {
        let row = boxes.row(r);
        if let Some(c) = row[..4].iter().find(|c| !(0.0..=1.0).contains(&c.as_f64())) {
            return Err(ModelError::Detection(format!("box {r} coordinate {c} outside [0, 1]")));
        }
        let classes = &row[4..cols];
        let ones = classes.iter().filter(|c| c.as_f64() == 1.0).count();
        let zeros = classes.iter().filter(|c| c.as_f64() == 0.0).count();
        if ones != 1 || ones + zeros != classes.len() {
            return Err(ModelError::Detection(format!("box {r} class vector is not one-hot")));
        }
    }
    Ok(())
}

/// Projects raw feature streams to encoder tokens `[rows × embed]`.
pub fn encode<F: Scalar>(g: &mut Graph<F>, config: &ArchitectureConfig, streams: &[Var]) -> Result<Var> {
    let want = config.adapter.num_streams();
    if streams.len() != want {
        return Err(ModelError::StreamCount {
            expected: want,
            got: streams.len(),
        });
    }
    match config.adapter {
        AdapterKind::Single => {
            check_dim(g, streams[0], 0, config.feature_dims[0])?;
            g.linear(streams[0], "adapter")
        }
        AdapterKind::Detection => {
            let x = streams[0];
            let d = config.feature_dims[0];
            check_dim(g, x, 0, d)?;
            validate_boxes(g.value(x), config.max_boxes)?;
            let rows = g.value(x).outer();
            let padded = if rows == config.max_boxes {
                x
            } else if rows == 0 {
                g.input(Tensor::zeros(&[config.max_boxes, d]))
            } else {
                let pad = g.input(Tensor::zeros(&[config.max_boxes - rows, d]));
                g.tape.concat_rows(&[x, pad])?
            };
            let flat = g.tape.reshape(padded, &[1, config.max_boxes * d])?;
            g.linear(flat, "adapter")
        }
        AdapterKind::Stacked => {
            check_dim(g, streams[0], 0, config.feature_dims[0])?;
            check_dim(g, streams[1], 1, config.feature_dims[1])?;
            let a = g.linear(streams[0], "adapter.a")?;
            let b = g.linear(streams[1], "adapter.b")?;
            Ok(g.tape.concat_rows(&[a, b])?)
        }
    }
}

fn check_prefix(config: &ArchitectureConfig, ids: &[TokenId]) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    if ids.len() > config.max_len {
        return Err(ModelError::PrefixTooLong {
            len: ids.len(),
            max: config.max_len,
        });
    }
    ids.iter()
        .map(|&id| {
            if (id as usize) < config.vocab_size {
                Ok(id as usize)
            } else {
                Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: config.vocab_size,
                })
            }
        })
        .collect()
}

/// Logits `[T × V]` for every prefix position.
pub fn decode<F: Scalar>(g: &mut Graph<F>, config: &ArchitectureConfig, ids: &[TokenId], enc: Var) -> Result<Var> {
    match config.decoder {
        DecoderKind::Transformer => transformer_forward(g, config, ids, enc),
        DecoderKind::Lstm => lstm_forward(g, config, ids, enc),
    }
}

pub fn transformer_forward<F: Scalar>(
    g: &mut Graph<F>,
    config: &ArchitectureConfig,
    ids: &[TokenId],
    enc: Var,
) -> Result<Var> {
    let ids = check_prefix(config, ids)?;
    let t = ids.len();
    let embed = g.p("embed")?;
    let x = g.tape.gather_rows(embed, &ids)?;
    let pe = g.input(positional_encoding(t, config.embed_size));
    let x = g.tape.add(x, pe)?;
    let mut x = g.dropout(x)?;
    let mask = g.input(causal_mask(t));
    for l in 0..config.num_layers {
        let a = g.attention(x, x, Some(mask), config.num_heads, &format!("layer{l}.self"))?;
        let r = g.tape.add(x, a)?;
        x = g.layer_norm(r, &format!("layer{l}.ln1"), LAYER_NORM_EPS)?;
        let a = g.attention(x, enc, None, config.num_heads, &format!("layer{l}.cross"))?;
        let r = g.tape.add(x, a)?;
        x = g.layer_norm(r, &format!("layer{l}.ln2"), LAYER_NORM_EPS)?;
        let h = g.linear(x, &format!("layer{l}.ffn1"))?;
        let h = g.tape.relu(h);
        let h = g.linear(h, &format!("layer{l}.ffn2"))?;
        let r = g.tape.add(x, h)?;
        x = g.layer_norm(r, &format!("layer{l}.ln3"), LAYER_NORM_EPS)?;
    }
    g.linear(x, "head")
}

/// Hidden and cell state of every LSTM layer, each `[1 × e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<F> {
    pub h: Vec<Tensor<F>>,
    pub c: Vec<Tensor<F>>,
}

struct VarState {
    h: Vec<Var>,
    c: Vec<Var>,
}

fn lstm_advance<F: Scalar>(g: &mut Graph<F>, state: &mut VarState, x: Var) -> Result<Var> {
    let mut input = x;
    for l in 0..state.h.len() {
        let (h, c) = g.lstm_cell(input, state.h[l], state.c[l], &format!("lstm{l}"))?;
        state.h[l] = h;
        state.c[l] = c;
        input = h;
    }
    Ok(input)
}

fn lstm_init<F: Scalar>(g: &mut Graph<F>, config: &ArchitectureConfig, enc: Var) -> Result<VarState> {
    let rows = g.value(enc).outer();
    if rows != 1 || g.value(enc).last_dim() != config.embed_size {
        return Err(ModelError::EncoderRows {
            expected: 1,
            got: g.value(enc).shape().to_vec(),
        });
    }
    let e = config.embed_size;
    let zeros: Vec<Var> = (0..config.num_layers).map(|_| g.input(Tensor::zeros(&[1, e]))).collect();
    let mut state = VarState {
        h: zeros.clone(),
        c: zeros,
    };
    lstm_advance(g, &mut state, enc)?;
    Ok(state)
}

fn lstm_token<F: Scalar>(g: &mut Graph<F>, state: &mut VarState, id: usize) -> Result<Var> {
    let embed = g.p("embed")?;
    let x = g.tape.gather_rows(embed, &[id])?;
    let x = g.dropout(x)?;
    let top = lstm_advance(g, state, x)?;
    g.linear(top, "head")
}

pub fn lstm_forward<F: Scalar>(
    g: &mut Graph<F>,
    config: &ArchitectureConfig,
    ids: &[TokenId],
    enc: Var,
) -> Result<Var> {
    let ids = check_prefix(config, ids)?;
    let mut state = lstm_init(g, config, enc)?;
    let rows = ids
        .iter()
        .map(|&id| lstm_token(g, &mut state, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.tape.concat_rows(&rows)?)
}

fn freeze<F: Scalar>(g: &Graph<F>, s: &VarState) -> LstmState<F> {
    LstmState {
        h: s.h.iter().map(|&v| g.value(v).clone()).collect(),
        c: s.c.iter().map(|&v| g.value(v).clone()).collect(),
    }
}

fn thaw<F: Scalar>(g: &mut Graph<F>, s: &LstmState<F>) -> VarState {
    VarState {
        h: s.h.iter().map(|t| g.input(t.clone())).collect(),
        c: s.c.iter().map(|t| g.input(t.clone())).collect(),
    }
}

/// State after consuming the encoder token.
pub fn lstm_start<F: Scalar>(g: &mut Graph<F>, config: &ArchitectureConfig, enc: Var) -> Result<LstmState<F>> {
    let s = lstm_init(g, config, enc)?;
    Ok(freeze(g, &s))
}

/// Consumes one token and returns the next state with its logits row.
pub fn lstm_step<F: Scalar>(
    g: &mut Graph<F>,
    config: &ArchitectureConfig,
    state: &LstmState<F>,
    id: TokenId,
) -> Result<(LstmState<F>, Vec<F>)> {
    let id = check_prefix(config, &[id])?[0];
    let mut s = thaw(g, state);
    let logits = lstm_token(g, &mut s, id)?;
    let row = g.value(logits).data().to_vec();
    Ok((freeze(g, &s), row))
}
