//! Transformer encoder sublayers. Sequences are `[positions, features]`
//! row matrices; weights act from the right (`x · W + b`).

use super::{Activation, Dropout};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Additive score for masked key positions.
pub const MASK_FILL: f64 = -1e9;

/// Scaled dot-product attention, `softmax(Q·Kᵀ / √d_k) · V`.
///
/// `key_mask[j] == false` removes key position `j` from every row.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, key_mask: Option<&[bool]>) -> Result<Var> {
    attention_with_weights(g, q, k, v, key_mask).map(|(out, _)| out)
}

/// Like [`attention`], also returning the `[n, m]` weight matrix.
pub fn attention_with_weights(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] {
        return Err(Error::Shape {
            op: "attention (Q vs K)",
            lhs: qs,
            rhs: ks,
        });
    }
    if ks[0] != vs[0] {
        return Err(Error::Shape {
            op: "attention (K vs V)",
            lhs: ks,
            rhs: vs,
        });
    }
    let d_k = qs[1] as f64;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / d_k.sqrt())?;
    if let Some(mask) = key_mask {
        if mask.len() != ks[0] {
            return Err(invalid(format!(
                "attention mask has {} entries for {} keys",
                mask.len(),
                ks[0]
            )));
        }
        let fill: Vec<f64> = mask.iter().map(|&keep| if keep { 0.0 } else { MASK_FILL }).collect();
        let fill = g.constant(Tensor::vector(fill)?);
        scores = g.add_bias(scores, fill)?;
    }
    let weights = g.softmax(scores, 1)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Head layout: `d_k = d_q = d_v = d_model / heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiHeadConfig {
    d_model: usize,
    heads: usize,
}

impl MultiHeadConfig {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "head count {heads} must divide model dim {d_model}"
            )));
        }
        Ok(MultiHeadConfig { d_model, heads })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Q/K/V/output projections, each `[d_model, d_model]` plus a `[d_model]`
/// bias. Head `h` uses columns `h·d_head .. (h+1)·d_head` of the Q/K/V
/// projections, which is the same as separate per-head matrices.
#[derive(Clone, Copy, Debug)]
pub struct MhaParams {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

pub fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    cfg: &MultiHeadConfig,
    p: &MhaParams,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let d = cfg.d_model();
    match g.shape(x) {
        [_, cols] if *cols == d => {}
        other => {
            return Err(Error::Shape {
                op: "multi_head_attention",
                lhs: other.to_vec(),
                rhs: vec![d],
            })
        }
    }
    let q = affine(g, x, p.w_q, p.b_q)?;
    let k = affine(g, x, p.w_k, p.b_k)?;
    let v = affine(g, x, p.w_v, p.b_v)?;
    let out = if cfg.heads() == 1 {
        attention(g, q, k, v, key_mask)?
    } else {
        let dh = cfg.d_head();
        let mut heads = Vec::with_capacity(cfg.heads());
        for h in 0..cfg.heads() {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice(q, 1, lo, hi)?;
            let kh = g.slice(k, 1, lo, hi)?;
            let vh = g.slice(v, 1, lo, hi)?;
            heads.push(attention(g, qh, kh, vh, key_mask)?);
        }
        g.concat(&heads, 1)?
    };
    affine(g, out, p.w_o, p.b_o)
}

/// Sinusoidal table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `PE[pos, 2i+1] = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(invalid(format!("positional encoding needs an even model dim, got {d_model}")));
    }
    if max_len == 0 {
        return Err(invalid("positional encoding needs max_len >= 1"));
    }
    let mut values = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            values[pos * d_model + 2 * i] = angle.sin();
            values[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![max_len, d_model], values)
}

/// Position-wise two-layer network weights: `[d, ff]`, `[ff]`, `[ff, d]`, `[d]`.
#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `act(x·W1 + b1)·W2 + b2`, row by row.
pub fn feed_forward(g: &mut Graph, x: Var, p: &FfnParams, act: Activation) -> Result<Var> {
    let h = affine(g, x, p.w1, p.b1)?;
    let h = act.apply(g, h)?;
    affine(g, h, p.w2, p.b2)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderBlockParams {
    pub attention: MhaParams,
    pub attention_norm: LayerNormParams,
    pub ffn: FfnParams,
    pub ffn_norm: LayerNormParams,
}

/// Post-norm encoder layer:
/// `h = LN(x + MHA(x))`, `out = LN(h + FFN(h))`.
#[allow(clippy::too_many_arguments)]
pub fn encoder_block(
    g: &mut Graph,
    x: Var,
    p: &EncoderBlockParams,
    cfg: &MultiHeadConfig,
    act: Activation,
    eps: f64,
    key_mask: Option<&[bool]>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let att = multi_head_attention(g, x, cfg, &p.attention, key_mask)?;
    let att = dropout.apply(g, att)?;
    let h = g.add(x, att)?;
    let h = g.layer_norm(h, p.attention_norm.gain, p.attention_norm.bias, eps)?;
    let ff = feed_forward(g, h, &p.ffn, act)?;
    let ff = dropout.apply(g, ff)?;
    let out = g.add(h, ff)?;
    g.layer_norm(out, p.ffn_norm.gain, p.ffn_norm.bias, eps)
}
