//! Central finite-difference checks for every differentiable piece.

use insincere::layers::{
    attention, bilstm_encode, encoder_block, feed_forward, gru_cell, lstm_cell,
    multi_head_attention, rnn_cell, Activation, Dropout, EncoderBlockParams, FfnParams,
    GruCellParams, LayerNormParams, LstmCellParams, MhaParams, MultiHeadConfig, RnnCellParams,
};
use insincere::models::{build_model, Forward, Model, ModelConfig, Variant};
use insincere::objectives::{bce_loss, distillation_losses, mlm_loss, DistillWeights};
use insincere::tensor::{Graph, Tensor, Var};
use insincere::tokenizer::TokenizedSequence;
use insincere::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    rand_tensor(rng, shape, -1.0, 1.0)
}

/// Values bounded away from zero, for kinks at the origin.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / (norm(analytic) + norm(numeric)).max(1e-8)
}

fn projected(g: &mut Graph, out: Var, r: &Tensor) -> Result<Var> {
    let rv = g.constant(r.clone());
    let m = g.mul(out, rv)?;
    g.sum(m)
}

fn value_at(inputs: &[Tensor], f: &Build, r: &Tensor) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let s = projected(&mut g, out, r).unwrap();
    g.value(s).item().unwrap()
}

/// Compares reverse-mode gradients of `sum(R ⊙ f(inputs))` with central
/// differences, `R` random.
pub fn check(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, f: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let r = normal(rng, g.shape(out));
    let s = projected(&mut g, out, &r).unwrap();
    g.backward(s).unwrap();
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(&inputs) {
        match g.grad(*v) {
            Some(gr) => analytic.extend_from_slice(gr),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.clone();
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let orig = work[i].values()[j];
            work[i].values_mut()[j] = orig + STEP;
            let up = value_at(&work, f, &r);
            work[i].values_mut()[j] = orig - STEP;
            let down = value_at(&work, f, &r);
            work[i].values_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

fn sequence(rng: &mut ChaCha8Rng, cfg: &ModelConfig, pair: bool) -> TokenizedSequence {
    let n = cfg.max_len;
    let real = rng.gen_range(3..=n);
    let mut ids = vec![0u32; n];
    let mut mask = vec![0u8; n];
    let mut seg = vec![0u8; n];
    ids[0] = 2;
    for i in 1..real - 1 {
        ids[i] = rng.gen_range(5..cfg.vocab_size as u32);
    }
    ids[real - 1] = 3;
    for m in mask.iter_mut().take(real) {
        *m = 1;
    }
    if pair {
        let cut = real / 2;
        ids[cut.max(1)] = 3;
        for s in seg.iter_mut().take(real).skip(cut.max(1) + 1) {
            *s = 1;
        }
        seg[real - 1] = 1;
    }
    TokenizedSequence {
        ids,
        attention_mask: mask,
        segment_ids: seg,
        original_length: real,
    }
}

/// Finite differences over every parameter of a model for a scalar loss.
pub fn check_model(
    rng: &mut ChaCha8Rng,
    mut model: Model,
    loss: &dyn Fn(&mut Forward) -> Result<Var>,
) -> f64 {
    let mut f = Forward::with_grad(&model);
    let l = loss(&mut f).unwrap();
    let grads = f.backward(l).unwrap();
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let eval = |m: &Model| {
        let mut f = Forward::with_grad(m);
        let l = loss(&mut f).unwrap();
        f.graph.value(l).item().unwrap()
    };
    for name in &names {
        let len = model.params().get(name).unwrap().len();
        // A random subset of coordinates keeps the cost bounded on big tables.
        let picks: Vec<usize> = if len <= 24 {
            (0..len).collect()
        } else {
            let mut p: Vec<usize> = (0..24).map(|_| rng.gen_range(0..len)).collect();
            p.sort_unstable();
            p.dedup();
            p
        };
        for j in picks {
            analytic.push(grads.get(name).map_or(0.0, |g| g[j]));
            let orig = model.params().get(name).unwrap().values()[j];
            model.params_mut().get_mut(name).unwrap().values_mut()[j] = orig + STEP;
            let up = eval(&model);
            model.params_mut().get_mut(name).unwrap().values_mut()[j] = orig - STEP;
            let down = eval(&model);
            model.params_mut().get_mut(name).unwrap().values_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

fn small_model_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = rng.gen_range(1..=2);
    let hidden = heads * 2 * rng.gen_range(1..=2);
    ModelConfig {
        num_layers: 2,
        hidden_size: hidden,
        num_heads: heads,
        ff_size: 2 * hidden,
        embedding_size: hidden,
        dropout_rate: 0.0,
        layer_norm_eps: 1e-5,
        ..ModelConfig::tiny(rng.gen_range(8..14), rng.gen_range(4..7))
    }
}

/// Every named check for one seed, as `(name, relative error)`.
pub fn suite(rng: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let m = rng.gen_range(1..4);
    let k = rng.gen_range(1..4);
    let n = rng.gen_range(1..4);

    let ins = vec![normal(rng, &[m, k]), normal(rng, &[k, n])];
    out.push(("matmul", check(rng, ins, &|g, v| g.matmul(v[0], v[1]))));

    let ins = vec![
        normal(rng, &[k, m]),
        normal(rng, &[m, k]),
        normal(rng, &[m, k]),
        rand_tensor(rng, &[m, k], 0.5, 2.0),
    ];
    out.push((
        "transpose/sub/mul/div",
        check(rng, ins, &|g, v| {
            let t = g.transpose(v[0])?;
            let d = g.sub(t, v[1])?;
            let p = g.mul(d, v[2])?;
            g.div(p, v[3])
        }),
    ));

    let ins = vec![normal(rng, &[m, n]), normal(rng, &[n])];
    out.push(("add_bias", check(rng, ins, &|g, v| g.add_bias(v[0], v[1]))));

    for (name, act) in [
        ("tanh", Activation::Tanh),
        ("sigmoid", Activation::Sigmoid),
        ("gelu", Activation::Gelu),
        ("relu", Activation::Relu),
    ] {
        let x = off_zero(rng, &[m, n]);
        out.push((name, check(rng, vec![x], &move |g, v| act.apply(g, v[0]))));
    }

    let ins = vec![normal(rng, &[m, n])];
    out.push(("exp/scale/add_scalar", check(rng, ins, &|g, v| {
        let e = g.exp(v[0])?;
        let s = g.scale(e, -1.7)?;
        g.add_scalar(s, 0.3)
    })));

    let ins = vec![rand_tensor(rng, &[m, n], 0.2, 3.0)];
    out.push(("ln/sqrt", check(rng, ins, &|g, v| {
        let a = g.ln(v[0])?;
        let b = g.sqrt(v[0])?;
        g.add(a, b)
    })));

    let ins = vec![rand_tensor(rng, &[m, n], 0.1, 0.9)];
    out.push(("clamp", check(rng, ins, &|g, v| g.clamp(v[0], 0.05, 0.95))));

    let ins = vec![normal(rng, &[m, n])];
    out.push(("sum/mean/sum_last/reshape", check(rng, ins, &|g, v| {
        let s = g.sum(v[0])?;
        let mn = g.mean(v[0])?;
        let r = g.reshape(v[0], &[n, m])?;
        let sl = g.sum_last(r)?;
        let sl = g.sum(sl)?;
        let a = g.mul(s, mn)?;
        g.add(a, sl)
    })));

    for axis in 0..2 {
        let ins = vec![rand_tensor(rng, &[m + 1, n + 1], -2.0, 2.0)];
        out.push(("softmax", check(rng, ins, &move |g, v| g.softmax(v[0], axis))));
        let ins = vec![rand_tensor(rng, &[m + 1, n + 1], -2.0, 2.0)];
        out.push(("log_softmax", check(rng, ins, &move |g, v| g.log_softmax(v[0], axis))));
    }

    let d = rng.gen_range(2..5);
    let ins = vec![rand_tensor(rng, &[m, d], -2.0, 2.0), normal(rng, &[d]), normal(rng, &[d])];
    out.push(("layer_norm", check(rng, ins, &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))));

    let ins = vec![normal(rng, &[m, n]), normal(rng, &[m, k]), normal(rng, &[k, n])];
    out.push(("concat/slice", check(rng, ins, &|g, v| {
        let c1 = g.concat(&[v[0], v[1]], 1)?;
        let c0 = g.concat(&[v[0], v[2]], 0)?;
        let s1 = g.slice(c1, 1, 0, 1)?;
        let s0 = g.slice(c0, 0, 0, 1)?;
        g.matmul(s1, s0)
    })));

    let rows = rng.gen_range(2..5);
    let ids: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..rows)).collect();
    let ins = vec![normal(rng, &[rows, n])];
    out.push(("gather_rows", check(rng, ins, &move |g, v| g.gather_rows(v[0], &ids))));

    // attention with a random key mask that keeps at least one key
    let (nq, nk, dk, dv) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..4));
    let mut mask: Vec<bool> = (0..nk).map(|_| rng.gen_bool(0.7)).collect();
    mask[rng.gen_range(0..nk)] = true;
    let ins = vec![normal(rng, &[nq, dk]), normal(rng, &[nk, dk]), normal(rng, &[nk, dv])];
    out.push(("attention", check(rng, ins, &move |g, v| attention(g, v[0], v[1], v[2], Some(&mask)))));

    let heads = rng.gen_range(1..3);
    let dm = heads * rng.gen_range(1..3);
    let rows = rng.gen_range(1..4);
    let cfg = MultiHeadConfig::new(dm, heads).unwrap();
    let mut ins = vec![normal(rng, &[rows, dm])];
    for _ in 0..4 {
        ins.push(normal(rng, &[dm, dm]));
        ins.push(normal(rng, &[dm]));
    }
    let mha = |v: &[Var]| MhaParams {
        w_q: v[1],
        b_q: v[2],
        w_k: v[3],
        b_k: v[4],
        w_v: v[5],
        b_v: v[6],
        w_o: v[7],
        b_o: v[8],
    };
    out.push(("multi_head_attention", check(rng, ins.clone(), &|g, v| {
        multi_head_attention(g, v[0], &cfg, &mha(v), None)
    })));

    let ff = rng.gen_range(1..5);
    let fins = vec![normal(rng, &[rows, dm]), normal(rng, &[dm, ff]), normal(rng, &[ff]), normal(rng, &[ff, dm]), normal(rng, &[dm])];
    out.push(("feed_forward", check(rng, fins, &|g, v| {
        feed_forward(g, v[0], &FfnParams { w1: v[1], b1: v[2], w2: v[3], b2: v[4] }, Activation::Gelu)
    })));

    let mut bins = ins;
    bins.extend([normal(rng, &[dm]), normal(rng, &[dm])]);
    bins.extend([normal(rng, &[dm, ff]), normal(rng, &[ff]), normal(rng, &[ff, dm]), normal(rng, &[dm])]);
    bins.extend([normal(rng, &[dm]), normal(rng, &[dm])]);
    let mut bmask: Vec<bool> = (0..rows).map(|_| rng.gen_bool(0.7)).collect();
    bmask[0] = true;
    out.push(("encoder_block", check(rng, bins, &move |g, v| {
        let p = EncoderBlockParams {
            attention: mha(v),
            attention_norm: LayerNormParams { gain: v[9], bias: v[10] },
            ffn: FfnParams { w1: v[11], b1: v[12], w2: v[13], b2: v[14] },
            ffn_norm: LayerNormParams { gain: v[15], bias: v[16] },
        };
        encoder_block(g, v[0], &p, &cfg, Activation::Gelu, 1e-5, Some(&bmask), &mut Dropout::disabled())
    })));

    // recurrent cells, column-vector convention
    let (dx, h, o) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..3));
    let ins = vec![
        normal(rng, &[dx, 1]),
        normal(rng, &[h, 1]),
        normal(rng, &[h, h]),
        normal(rng, &[h, dx]),
        normal(rng, &[o, h]),
        normal(rng, &[h, 1]),
        normal(rng, &[o, 1]),
    ];
    out.push(("rnn_cell", check(rng, ins, &|g, v| {
        let p = RnnCellParams { w_aa: v[2], w_ax: v[3], w_ya: v[4], b_a: v[5], b_y: v[6], g1: Activation::Tanh, g2: Activation::Sigmoid };
        let (a, y) = rnn_cell(g, v[0], v[1], &p)?;
        g.concat(&[a, y], 0)
    })));

    let lstm_inputs = |rng: &mut ChaCha8Rng| -> Vec<Tensor> {
        let mut t = Vec::new();
        for _ in 0..5 {
            t.push(normal(rng, &[h, h + dx]));
            t.push(normal(rng, &[h, 1]));
        }
        t
    };
    let lstm = |v: &[Var], output_tanh: bool| LstmCellParams {
        w_update: v[0],
        b_update: v[1],
        w_relevance: v[2],
        b_relevance: v[3],
        w_forget: v[4],
        b_forget: v[5],
        w_output: v[6],
        b_output: v[7],
        w_candidate: v[8],
        b_candidate: v[9],
        output_tanh,
    };
    for output_tanh in [false, true] {
        let mut ins = vec![normal(rng, &[dx, 1]), normal(rng, &[h, 1]), normal(rng, &[h, 1])];
        ins.extend(lstm_inputs(rng));
        out.push(("lstm_cell", check(rng, ins, &move |g, v| {
            let (a, c) = lstm_cell(g, v[0], v[1], v[2], &lstm(&v[3..], output_tanh))?;
            g.concat(&[a, c], 0)
        })));
    }

    let mut ins = vec![normal(rng, &[dx, 1]), normal(rng, &[h, 1])];
    for _ in 0..3 {
        ins.push(normal(rng, &[h, h + dx]));
        ins.push(normal(rng, &[h, 1]));
    }
    out.push(("gru_cell", check(rng, ins, &|g, v| {
        let p = GruCellParams { w_update: v[2], b_update: v[3], w_reset: v[4], b_reset: v[5], w_candidate: v[6], b_candidate: v[7] };
        gru_cell(g, v[0], v[1], &p)
    })));

    let steps = rng.gen_range(1..4);
    let mut ins: Vec<Tensor> = (0..steps).map(|_| normal(rng, &[dx, 1])).collect();
    ins.extend(lstm_inputs(rng));
    ins.extend(lstm_inputs(rng));
    out.push(("bilstm_encode", check(rng, ins, &move |g, v| {
        let fwd = lstm(&v[steps..steps + 10], false);
        let bwd = lstm(&v[steps + 10..steps + 20], false);
        let states = bilstm_encode(g, &v[..steps], &fwd, &bwd)?;
        g.concat(&states, 1)
    })));

    // losses
    let labels: Vec<f64> = (0..m + 1).map(|_| rng.gen_range(0..2) as f64).collect();
    let ins = vec![normal(rng, &[m + 1])];
    out.push(("bce_loss", check(rng, ins, &move |g, v| {
        let p = g.sigmoid(v[0])?;
        bce_loss(g, p, &labels)
    })));

    let vocab = rng.gen_range(2..6);
    let targets: Vec<u32> = (0..k).map(|_| rng.gen_range(0..vocab as u32)).collect();
    let ins = vec![rand_tensor(rng, &[k, vocab], -2.0, 2.0)];
    let t2 = targets.clone();
    out.push(("mlm_loss", check(rng, ins, &move |g, v| mlm_loss(g, v[0], &t2))));

    let hd = rng.gen_range(2..5);
    let w = DistillWeights {
        mlm: rng.gen_range(0.5..1.5),
        cosine: rng.gen_range(0.5..1.5),
        kd: rng.gen_range(0.5..1.5),
        temperature: rng.gen_range(1.0..3.0),
    };
    let ins = vec![
        rand_tensor(rng, &[k, vocab], -2.0, 2.0),
        rand_tensor(rng, &[k, vocab], -2.0, 2.0),
        off_zero(rng, &[k, hd]),
        off_zero(rng, &[k, hd]),
    ];
    for (name, pick) in [("distill_mlm", 0usize), ("distill_cosine", 1), ("distill_kd", 2), ("distill_total", 3)] {
        let t3 = targets.clone();
        out.push((name, check(rng, ins.clone(), &move |g, v| {
            let l = distillation_losses(g, v[0], v[1], v[2], v[3], &t3, w)?;
            Ok([l.mlm, l.cosine, l.kd, l.total][pick])
        })));
    }

    // assembled encoders
    let base = small_model_config(rng);
    for variant in Variant::ALL {
        let mut cfg = variant.config(&base).unwrap();
        if variant == Variant::Albert {
            cfg.embedding_size = (cfg.hidden_size / 2).max(1);
        }
        let model = build_model(cfg.clone(), rng.gen()).unwrap();
        let seq = sequence(rng, &cfg, true);
        let label = rng.gen_range(0..2) as f64;
        let cls_seq = seq.clone();
        out.push(("model_classifier", check_model(rng, model.clone(), &move |f| {
            let z = f.classify_logit(&cls_seq)?;
            let p = f.graph.sigmoid(z)?;
            bce_loss(&mut f.graph, p, &[label])
        })));
        let positions: Vec<usize> = (1..seq.original_length - 1).take(2).collect();
        let targets: Vec<u32> = positions.iter().map(|_| rng.gen_range(5..cfg.vocab_size as u32)).collect();
        let mlm_seq = seq.clone();
        out.push(("model_mlm_and_pair", check_model(rng, model, &move |f| {
            let hidden = f.encode(&mlm_seq)?;
            let logits = f.mlm_logits_from_hidden(hidden, &mlm_seq, &positions)?;
            let l = mlm_loss(&mut f.graph, logits, &targets)?;
            let z = f.pair_logit_from_hidden(hidden)?;
            let p = f.graph.sigmoid(z)?;
            let b = bce_loss(&mut f.graph, p, &[label])?;
            f.graph.add(l, b)
        })));
    }
    out
}
