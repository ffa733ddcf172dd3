//! Recurrent cells. Vectors are column vectors (`[n, 1]`); weights act from
//! the left.

use rand::Rng;

use super::{glorot_uniform, Activation};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

fn column_len(g: &Graph, v: Var, what: &str) -> Result<usize> {
    match g.shape(v) {
        [n, 1] => Ok(*n),
        other => Err(invalid(format!("{what} must be a column vector, got {other:?}"))),
    }
}

fn expect_shape(g: &Graph, v: Var, want: &[usize], op: &'static str) -> Result<()> {
    if g.shape(v) != want {
        return Err(Error::Shape {
            op,
            lhs: g.shape(v).to_vec(),
            rhs: want.to_vec(),
        });
    }
    Ok(())
}

/// `σ(W · [a; x] + b)` or any other activation of the same affine form.
fn gate(g: &mut Graph, w: Var, b: Var, ax: Var, act: Activation) -> Result<Var> {
    let z = g.matmul(w, ax)?;
    let z = g.add(z, b)?;
    act.apply(g, z)
}

/// `1 - x`
fn one_minus(g: &mut Graph, x: Var) -> Result<Var> {
    let neg = g.scale(x, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Vanilla RNN cell weights, shared across timesteps.
#[derive(Clone, Copy, Debug)]
pub struct RnnCellParams {
    /// `[hidden, hidden]`
    pub w_aa: Var,
    /// `[hidden, input]`
    pub w_ax: Var,
    /// `[output, hidden]`
    pub w_ya: Var,
    pub b_a: Var,
    pub b_y: Var,
    pub g1: Activation,
    pub g2: Activation,
}

impl RnnCellParams {
    pub fn init(
        g: &mut Graph,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(RnnCellParams {
            w_aa: g.param(glorot_uniform(hidden, hidden, rng)?),
            w_ax: g.param(glorot_uniform(hidden, input, rng)?),
            w_ya: g.param(glorot_uniform(output, hidden, rng)?),
            b_a: g.param(Tensor::zeros(vec![hidden, 1])?),
            b_y: g.param(Tensor::zeros(vec![output, 1])?),
            g1: Activation::Tanh,
            g2: Activation::Sigmoid,
        })
    }
}

/// One RNN step: `a = g1(W_aa·a_prev + W_ax·x + b_a)`, `y = g2(W_ya·a + b_y)`.
pub fn rnn_cell(g: &mut Graph, x_t: Var, a_prev: Var, p: &RnnCellParams) -> Result<(Var, Var)> {
    let input = column_len(g, x_t, "x_t")?;
    let hidden = column_len(g, a_prev, "a_prev")?;
    expect_shape(g, p.w_aa, &[hidden, hidden], "rnn_cell W_aa")?;
    expect_shape(g, p.w_ax, &[hidden, input], "rnn_cell W_ax")?;
    expect_shape(g, p.b_a, &[hidden, 1], "rnn_cell b_a")?;
    let recur = g.matmul(p.w_aa, a_prev)?;
    let inp = g.matmul(p.w_ax, x_t)?;
    let z = g.add(recur, inp)?;
    let z = g.add(z, p.b_a)?;
    let a = p.g1.apply(g, z)?;
    let y = g.matmul(p.w_ya, a)?;
    let y = g.add(y, p.b_y)?;
    let y = p.g2.apply(g, y)?;
    Ok((a, y))
}

/// LSTM weights. Every matrix is `[hidden, hidden + input]` and multiplies
/// the stacked column `[a_prev; x]`; biases are `[hidden, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmCellParams {
    pub w_update: Var,
    pub b_update: Var,
    pub w_relevance: Var,
    pub b_relevance: Var,
    pub w_forget: Var,
    pub b_forget: Var,
    pub w_output: Var,
    pub b_output: Var,
    pub w_candidate: Var,
    pub b_candidate: Var,
    /// `a = Γ_o ⊙ tanh(c)` instead of the plain `a = Γ_o ⊙ c`.
    pub output_tanh: bool,
}

impl LstmCellParams {
    pub fn init(g: &mut Graph, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut ws = Vec::with_capacity(5);
        for _ in 0..5 {
            ws.push(g.param(glorot_uniform(hidden, hidden + input, rng)?));
        }
        let mut bs = Vec::with_capacity(5);
        for _ in 0..5 {
            bs.push(g.param(Tensor::zeros(vec![hidden, 1])?));
        }
        Ok(LstmCellParams {
            w_update: ws[0],
            b_update: bs[0],
            w_relevance: ws[1],
            b_relevance: bs[1],
            w_forget: ws[2],
            b_forget: bs[2],
            w_output: ws[3],
            b_output: bs[3],
            w_candidate: ws[4],
            b_candidate: bs[4],
            output_tanh: false,
        })
    }

    fn hidden(&self, g: &Graph) -> usize {
        g.shape(self.b_update)[0]
    }
}

/// One LSTM step with gates `Γ = σ(W_Γ·[a_prev; x] + b_Γ)`:
///
/// ```text
/// c̃ = tanh(W_c·[Γ_r ⊙ a_prev; x] + b_c)
/// c  = Γ_u ⊙ c̃ + Γ_f ⊙ c_prev
/// a  = Γ_o ⊙ c
/// ```
pub fn lstm_cell(
    g: &mut Graph,
    x_t: Var,
    a_prev: Var,
    c_prev: Var,
    p: &LstmCellParams,
) -> Result<(Var, Var)> {
    let input = column_len(g, x_t, "x_t")?;
    let hidden = column_len(g, a_prev, "a_prev")?;
    expect_shape(g, c_prev, &[hidden, 1], "lstm_cell c_prev")?;
    for w in [p.w_update, p.w_relevance, p.w_forget, p.w_output, p.w_candidate] {
        expect_shape(g, w, &[hidden, hidden + input], "lstm_cell weight")?;
    }
    for b in [p.b_update, p.b_relevance, p.b_forget, p.b_output, p.b_candidate] {
        expect_shape(g, b, &[hidden, 1], "lstm_cell bias")?;
    }
    let ax = g.concat(&[a_prev, x_t], 0)?;
    let update = gate(g, p.w_update, p.b_update, ax, Activation::Sigmoid)?;
    let relevance = gate(g, p.w_relevance, p.b_relevance, ax, Activation::Sigmoid)?;
    let forget = gate(g, p.w_forget, p.b_forget, ax, Activation::Sigmoid)?;
    let output = gate(g, p.w_output, p.b_output, ax, Activation::Sigmoid)?;

    let gated_a = g.mul(relevance, a_prev)?;
    let gx = g.concat(&[gated_a, x_t], 0)?;
    let candidate = gate(g, p.w_candidate, p.b_candidate, gx, Activation::Tanh)?;

    let keep_new = g.mul(update, candidate)?;
    let keep_old = g.mul(forget, c_prev)?;
    let c = g.add(keep_new, keep_old)?;
    let a = if p.output_tanh {
        let tc = g.tanh(c)?;
        g.mul(output, tc)?
    } else {
        g.mul(output, c)?
    };
    Ok((a, c))
}

/// Standard two-gate GRU weights (update and reset), each `[hidden, hidden + input]`.
#[derive(Clone, Copy, Debug)]
pub struct GruCellParams {
    pub w_update: Var,
    pub b_update: Var,
    pub w_reset: Var,
    pub b_reset: Var,
    pub w_candidate: Var,
    pub b_candidate: Var,
}

impl GruCellParams {
    pub fn init(g: &mut Graph, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let w_update = g.param(glorot_uniform(hidden, hidden + input, rng)?);
        let w_reset = g.param(glorot_uniform(hidden, hidden + input, rng)?);
        let w_candidate = g.param(glorot_uniform(hidden, hidden + input, rng)?);
        Ok(GruCellParams {
            w_update,
            b_update: g.param(Tensor::zeros(vec![hidden, 1])?),
            w_reset,
            b_reset: g.param(Tensor::zeros(vec![hidden, 1])?),
            w_candidate,
            b_candidate: g.param(Tensor::zeros(vec![hidden, 1])?),
        })
    }
}

/// One GRU step:
///
/// ```text
/// z = σ(W_z·[a_prev; x] + b_z)          update
/// r = σ(W_r·[a_prev; x] + b_r)          reset
/// h = tanh(W_h·[r ⊙ a_prev; x] + b_h)   candidate
/// a = z ⊙ a_prev + (1 - z) ⊙ h
/// ```
pub fn gru_cell(g: &mut Graph, x_t: Var, a_prev: Var, p: &GruCellParams) -> Result<Var> {
    let input = column_len(g, x_t, "x_t")?;
    let hidden = column_len(g, a_prev, "a_prev")?;
    for w in [p.w_update, p.w_reset, p.w_candidate] {
        expect_shape(g, w, &[hidden, hidden + input], "gru_cell weight")?;
    }
    for b in [p.b_update, p.b_reset, p.b_candidate] {
        expect_shape(g, b, &[hidden, 1], "gru_cell bias")?;
    }
    let ax = g.concat(&[a_prev, x_t], 0)?;
    let update = gate(g, p.w_update, p.b_update, ax, Activation::Sigmoid)?;
    let reset = gate(g, p.w_reset, p.b_reset, ax, Activation::Sigmoid)?;
    let gated = g.mul(reset, a_prev)?;
    let gx = g.concat(&[gated, x_t], 0)?;
    let candidate = gate(g, p.w_candidate, p.b_candidate, gx, Activation::Tanh)?;
    let keep = g.mul(update, a_prev)?;
    let inv = one_minus(g, update)?;
    let fresh = g.mul(inv, candidate)?;
    g.add(keep, fresh)
}

/// Runs one LSTM left-to-right and another right-to-left over `xs` and
/// stacks their states per step: `[a_fwd_t; a_bwd_t]`, `[2·hidden, 1]`.
pub fn bilstm_encode(
    g: &mut Graph,
    xs: &[Var],
    fwd: &LstmCellParams,
    bwd: &LstmCellParams,
) -> Result<Vec<Var>> {
    if xs.is_empty() {
        return Err(invalid("bilstm_encode needs a non-empty sequence"));
    }
    let run = |g: &mut Graph, p: &LstmCellParams, order: &mut dyn Iterator<Item = usize>| {
        let h = p.hidden(g);
        let mut a = g.constant(Tensor::zeros(vec![h, 1])?);
        let mut c = g.constant(Tensor::zeros(vec![h, 1])?);
        let mut states = vec![a; xs.len()];
        for t in order {
            (a, c) = lstm_cell(g, xs[t], a, c, p)?;
            states[t] = a;
        }
        Ok::<_, Error>(states)
    };
    let forward = run(g, fwd, &mut (0..xs.len()))?;
    let backward = run(g, bwd, &mut (0..xs.len()).rev())?;
    forward
        .into_iter()
        .zip(backward)
        .map(|(f, b)| g.concat(&[f, b], 0))
        .collect()
}
