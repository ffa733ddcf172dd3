use crate::error::{invalid, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-12;

const NORM_FLOOR: f64 = 1e-300;

/// Mean binary cross entropy of probabilities `p` (any shape) against 0/1 labels.
pub fn bce_loss(g: &mut Graph, p: Var, labels: &[f64]) -> Result<Var> {
    let n = g.value(p).len();
    if n != labels.len() {
        return Err(Error::Shape {
            op: "bce_loss",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(invalid("binary labels must be 0 or 1"));
    }
    let p = g.reshape(p, &[n])?;
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let y = g.constant(Tensor::vector(labels.to_vec())?);
    let one_minus_y = g.constant(Tensor::vector(labels.iter().map(|y| 1.0 - y).collect())?);
    let ln_p = g.ln(p)?;
    let q = g.scale(p, -1.0)?;
    let q = g.add_scalar(q, 1.0)?;
    let ln_q = g.ln(q)?;
    let a = g.mul(y, ln_p)?;
    let b = g.mul(one_minus_y, ln_q)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    g.scale(m, -1.0)
}

pub fn bce_loss_values(p: &[f64], labels: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(p.to_vec())?);
    let loss = bce_loss(&mut g, v, labels)?;
    g.value(loss).item()
}

fn one_hot(rows: usize, cols: usize, targets: &[u32]) -> Result<Tensor> {
    let mut t = vec![0.0; rows * cols];
    for (r, &id) in targets.iter().enumerate() {
        if id as usize >= cols {
            return Err(invalid(format!("target id {id} outside {cols} classes")));
        }
        t[r * cols + id as usize] = 1.0;
    }
    Tensor::new(vec![rows, cols], t)
}

/// Mean cross entropy of `[k, V]` logits against `k` target ids.
pub fn mlm_loss(g: &mut Graph, logits: Var, targets: &[u32]) -> Result<Var> {
    let (k, v) = g.value(logits).dims2()?;
    if targets.is_empty() || k == 0 {
        return Err(invalid("masked-LM loss needs at least one masked position"));
    }
    if k != targets.len() {
        return Err(Error::Shape {
            op: "mlm_loss",
            lhs: vec![k, v],
            rhs: vec![targets.len()],
        });
    }
    let lp = g.log_softmax(logits, 1)?;
    let hot = g.constant(one_hot(k, v, targets)?);
    let picked = g.mul(lp, hot)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / k as f64)
}

pub fn mlm_loss_values(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(logits.clone());
    let loss = mlm_loss(&mut g, v, targets)?;
    g.value(loss).item()
}

/// Weights of the three distillation terms and the softening temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillWeights {
    pub mlm: f64,
    pub cosine: f64,
    pub kd: f64,
    pub temperature: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        DistillWeights {
            mlm: 1.0,
            cosine: 1.0,
            kd: 1.0,
            temperature: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DistillLosses {
    pub mlm: Var,
    pub cosine: Var,
    pub kd: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct DistillValues {
    pub mlm: f64,
    pub cosine: f64,
    pub kd: f64,
    pub total: f64,
}

fn same_dims(g: &Graph, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
    let da = g.value(a).dims2()?;
    let db = g.value(b).dims2()?;
    if da != db {
        return Err(Error::Shape {
            op,
            lhs: vec![da.0, da.1],
            rhs: vec![db.0, db.1],
        });
    }
    Ok(da)
}

/// Student-versus-teacher losses over `k` masked positions.
///
/// `mlm` is cross entropy against the original ids, `cosine` the mean of
/// `1 - cos(student_hidden, teacher_hidden)` per row, and `kd` the mean of
/// `KL(softmax(teacher / T) || softmax(student / T)) * T^2` per row.
/// Teacher inputs may be constants or tracked vars.
#[allow(clippy::too_many_arguments)]
pub fn distillation_losses(
    g: &mut Graph,
    student_logits: Var,
    teacher_logits: Var,
    student_hidden: Var,
    teacher_hidden: Var,
    targets: &[u32],
    weights: DistillWeights,
) -> Result<DistillLosses> {
    let t = weights.temperature;
    if !(t > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {t}")));
    }
    let (k, _) = same_dims(g, student_logits, teacher_logits, "distillation logits")?;
    let (kh, _) = same_dims(g, student_hidden, teacher_hidden, "distillation hidden")?;
    if k != kh {
        return Err(invalid("logit and hidden position counts differ"));
    }
    let mlm = mlm_loss(g, student_logits, targets)?;

    let dot = g.mul(student_hidden, teacher_hidden)?;
    let dot = g.sum_last(dot)?;
    let ss = g.mul(student_hidden, student_hidden)?;
    let ss = g.sum_last(ss)?;
    let tt = g.mul(teacher_hidden, teacher_hidden)?;
    let tt = g.sum_last(tt)?;
    let denom = g.mul(ss, tt)?;
    let denom = g.clamp(denom, NORM_FLOOR, f64::MAX)?;
    let denom = g.sqrt(denom)?;
    let cos = g.div(dot, denom)?;
    let cos_mean = g.mean(cos)?;
    let cosine = g.scale(cos_mean, -1.0)?;
    let cosine = g.add_scalar(cosine, 1.0)?;

    let s_soft = g.scale(student_logits, 1.0 / t)?;
    let t_soft = g.scale(teacher_logits, 1.0 / t)?;
    let log_s = g.log_softmax(s_soft, 1)?;
    let log_t = g.log_softmax(t_soft, 1)?;
    let p_t = g.exp(log_t)?;
    let diff = g.sub(log_t, log_s)?;
    let kl = g.mul(p_t, diff)?;
    let kl = g.sum(kl)?;
    let kd = g.scale(kl, t * t / k as f64)?;

    let a = g.scale(mlm, weights.mlm)?;
    let b = g.scale(cosine, weights.cosine)?;
    let c = g.scale(kd, weights.kd)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(DistillLosses {
        mlm,
        cosine,
        kd,
        total,
    })
}

pub fn distillation_loss_values(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    student_hidden: &Tensor,
    teacher_hidden: &Tensor,
    targets: &[u32],
    weights: DistillWeights,
) -> Result<DistillValues> {
    let mut g = Graph::new();
    let sl = g.constant(student_logits.clone());
    let tl = g.constant(teacher_logits.clone());
    let sh = g.constant(student_hidden.clone());
    let th = g.constant(teacher_hidden.clone());
    let l = distillation_losses(&mut g, sl, tl, sh, th, targets, weights)?;
    Ok(DistillValues {
        mlm: g.value(l.mlm).item()?,
        cosine: g.value(l.cosine).item()?,
        kd: g.value(l.kd).item()?,
        total: g.value(l.total).item()?,
    })
}
