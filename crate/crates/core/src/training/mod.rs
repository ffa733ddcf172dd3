//! Optimization loops and evaluation metrics.

mod adam;
mod metrics;

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use metrics::{
    confusion_counts, f1_from, mann_whitney_wins2, metrics_report, precision_recall_f1, roc_auc,
    Confusion, MetricsReport, DEFAULT_THRESHOLD,
};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::models::{forward_classify, Forward, MaskingStrategy, Model};
use crate::objectives::{
    bce_loss, distillation_losses, dynamic_mask, generate_static_masks, maskable_positions,
    mlm_loss, DistillWeights, MaskPlan, DEFAULT_MASK_RATE,
};
use crate::tensor::{GradMap, Graph};
use crate::tokenizer::{TokenizedSequence, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Mlm,
    Distill,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Bce => "bce",
            LossKind::Mlm => "mlm",
            LossKind::Distill => "distill",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "mlm" => Ok(LossKind::Mlm),
            "distill" => Ok(LossKind::Distill),
            other => Err(invalid(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub clip_norm: Option<f64>,
    pub mask_rate: f64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 16,
            epochs: 3,
            seed: 0,
            loss: LossKind::Bce,
            clip_norm: None,
            mask_rate: DEFAULT_MASK_RATE,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn with_loss(loss: LossKind) -> Self {
        TrainConfig {
            loss,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                problems.push(format!("clip_norm must be positive, got {c}"));
            }
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            problems.push(format!("mask_rate must be in (0, 1), got {}", self.mask_rate));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            problems.push(format!("threshold must be in (0, 1), got {}", self.threshold));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn expect(&self, loss: LossKind) -> Result<()> {
        self.validate()?;
        if self.loss != loss {
            return Err(Error::Config(format!(
                "this loop trains with the {loss} loss, config asks for {}",
                self.loss
            )));
        }
        Ok(())
    }
}

/// A sequence with a 0/1 label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub seq: TokenizedSequence,
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<MetricsReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

fn add_scaled(acc: &mut GradMap, grads: GradMap, s: f64) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += s * b),
            None => {
                acc.insert(name, g.into_iter().map(|v| v * s).collect());
            }
        }
    }
}

fn apply_update(model: &mut Model, mut grads: GradMap, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if let Some(c) = cfg.clip_norm {
        clip_grad_norm(&mut grads, c);
    }
    adam_step(model.params_mut(), &grads, state, cfg.learning_rate)
}

/// Runs `per_example` over shuffled mini-batches for every epoch; the
/// closure returns `(loss, gradients)` for one example index.
fn run_epochs<F, E>(
    model: &mut Model,
    n: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut per_example: F,
    mut end_of_epoch: E,
) -> Result<History>
where
    F: FnMut(&Model, usize, usize, u64) -> Result<(f64, GradMap)>,
    E: FnMut(&Model, usize) -> Result<Option<MetricsReport>>,
{
    if n == 0 {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut state = AdamState::new();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut loss_sum, mut steps) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut acc = GradMap::new();
            for &i in batch {
                let dropout_seed = rng.gen::<u64>();
                let (loss, grads) = per_example(model, epoch, i, dropout_seed)?;
                if !loss.is_finite() {
                    return Err(invalid(format!("non-finite loss in epoch {epoch}")));
                }
                loss_sum += loss;
                add_scaled(&mut acc, grads, scale);
            }
            apply_update(model, acc, &mut state, cfg)?;
            steps += 1;
        }
        let validation = end_of_epoch(model, epoch)?;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            steps,
            mean_loss: loss_sum / n as f64,
            validation,
        });
    }
    Ok(history)
}

fn classifier_step(model: &Model, ex: &LabeledSequence, dropout_seed: u64) -> Result<(f64, GradMap)> {
    let mut f = Forward::train(model, dropout_seed)?;
    let z = f.classify_logit(&ex.seq)?;
    let p = f.graph.sigmoid(z)?;
    let loss = bce_loss(&mut f.graph, p, &[ex.label])?;
    let value = f.graph.value(loss).item()?;
    Ok((value, f.backward(loss)?))
}

/// Fine-tunes the classifier head and encoder with binary cross entropy.
pub fn train(
    model: &mut Model,
    data: &[LabeledSequence],
    validation: Option<&[LabeledSequence]>,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.expect(LossKind::Bce)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run_epochs(
        model,
        data.len(),
        cfg,
        &mut rng,
        |m, _, i, seed| classifier_step(m, &data[i], seed),
        |m, _| validation.map(|v| evaluate(m, v, cfg.threshold)).transpose(),
    )
}

/// Pretraining inputs: single sequences, or encoded pairs with labels for
/// the next-sentence / sentence-order head.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainData {
    pub sequences: Vec<TokenizedSequence>,
    pub pair_labels: Option<Vec<f64>>,
}

enum Plans {
    Static(crate::objectives::StaticMasks),
    Dynamic,
}

/// Masked-LM pretraining, plus the pair objective when labels are present.
/// Sequences without maskable tokens are dropped.
pub fn pretrain(
    model: &mut Model,
    data: &PretrainData,
    vocab: &Vocab,
    masking: MaskingStrategy,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.expect(LossKind::Mlm)?;
    if let Some(l) = &data.pair_labels {
        if l.len() != data.sequences.len() {
            return Err(invalid("one pair label per sequence required"));
        }
    }
    let keep: Vec<usize> = (0..data.sequences.len())
        .filter(|&i| !maskable_positions(&data.sequences[i], vocab).is_empty())
        .collect();
    if keep.is_empty() {
        return Err(Error::Dataset("no sequence has a maskable token".into()));
    }
    let seqs: Vec<TokenizedSequence> = keep.iter().map(|&i| data.sequences[i].clone()).collect();
    let labels: Option<Vec<f64>> = data
        .pair_labels
        .as_ref()
        .map(|l| keep.iter().map(|&i| l[i]).collect());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plans = match masking {
        MaskingStrategy::Static { num_masks } => Plans::Static(generate_static_masks(
            &seqs,
            vocab,
            num_masks,
            cfg.mask_rate,
            &mut rng,
        )?),
        MaskingStrategy::Dynamic => Plans::Dynamic,
    };
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_736b);
    run_epochs(
        model,
        seqs.len(),
        cfg,
        &mut rng,
        |m, epoch, i, seed| {
            let plan = match &plans {
                Plans::Static(s) => s.plan_for(epoch, i).expect("plan per sequence").clone(),
                Plans::Dynamic => {
                    let (_, mut p) = dynamic_mask(std::slice::from_ref(&seqs[i]), vocab, cfg.mask_rate, &mut mask_rng)?;
                    p.remove(0)
                }
            };
            mlm_step(m, &seqs[i], &plan, labels.as_ref().map(|l| l[i]), seed)
        },
        |_, _| Ok(None),
    )
}

fn mlm_step(
    model: &Model,
    seq: &TokenizedSequence,
    plan: &MaskPlan,
    pair_label: Option<f64>,
    dropout_seed: u64,
) -> Result<(f64, GradMap)> {
    let masked = plan.apply(seq)?;
    let mut f = Forward::train(model, dropout_seed)?;
    let hidden = f.encode(&masked)?;
    let logits = f.mlm_logits_from_hidden(hidden, &masked, &plan.positions())?;
    let mut loss = mlm_loss(&mut f.graph, logits, &plan.original_ids())?;
    if let Some(y) = pair_label {
        let z = f.pair_logit_from_hidden(hidden)?;
        let p = f.graph.sigmoid(z)?;
        let pair = bce_loss(&mut f.graph, p, &[y])?;
        loss = f.graph.add(loss, pair)?;
    }
    let value = f.graph.value(loss).item()?;
    Ok((value, f.backward(loss)?))
}

/// Trains `student` to mimic `teacher` on masked inputs with the triple
/// loss. Masks are drawn fresh every time a sequence is visited.
pub fn distill(
    student: &mut Model,
    teacher: &Model,
    sequences: &[TokenizedSequence],
    vocab: &Vocab,
    weights: DistillWeights,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.expect(LossKind::Distill)?;
    let (s, t) = (student.config(), teacher.config());
    if s.hidden_size != t.hidden_size || s.vocab_size != t.vocab_size {
        return Err(Error::Config(
            "student and teacher must share hidden size and vocabulary".into(),
        ));
    }
    let seqs: Vec<&TokenizedSequence> = sequences
        .iter()
        .filter(|q| !maskable_positions(q, vocab).is_empty())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_736b);
    run_epochs(
        student,
        seqs.len(),
        cfg,
        &mut rng,
        |m, _, i, seed| {
            let (masked, mut plans) = dynamic_mask(std::slice::from_ref(seqs[i]), vocab, cfg.mask_rate, &mut mask_rng)?;
            let plan = plans.remove(0);
            distill_step(m, teacher, &masked[0], &plan, weights, seed)
        },
        |_, _| Ok(None),
    )
}

/// Teacher logits and hidden states at `positions`, evaluation mode.
pub fn teacher_targets(
    teacher: &Model,
    seq: &TokenizedSequence,
    positions: &[usize],
) -> Result<(crate::tensor::Tensor, crate::tensor::Tensor)> {
    let mut f = Forward::eval(teacher);
    let hidden = f.encode(seq)?;
    let picked = f.graph.gather_rows(hidden, positions)?;
    let logits = f.mlm_logits_from_hidden(hidden, seq, positions)?;
    Ok((f.graph.value(logits).clone(), f.graph.value(picked).clone()))
}

fn distill_step(
    student: &Model,
    teacher: &Model,
    masked: &TokenizedSequence,
    plan: &MaskPlan,
    weights: DistillWeights,
    dropout_seed: u64,
) -> Result<(f64, GradMap)> {
    let positions = plan.positions();
    let (t_logits, t_hidden) = teacher_targets(teacher, masked, &positions)?;
    let mut f = Forward::train(student, dropout_seed)?;
    let hidden = f.encode(masked)?;
    let s_hidden = f.graph.gather_rows(hidden, &positions)?;
    let s_logits = f.mlm_logits_from_hidden(hidden, masked, &positions)?;
    let tl = f.graph.constant(t_logits);
    let th = f.graph.constant(t_hidden);
    let l = distillation_losses(&mut f.graph, s_logits, tl, s_hidden, th, &plan.original_ids(), weights)?;
    let value = f.graph.value(l.total).item()?;
    Ok((value, f.backward(l.total)?))
}

/// Mean distillation terms of `student` against `teacher` in evaluation mode,
/// over one seeded mask per sequence.
pub fn distillation_eval(
    student: &Model,
    teacher: &Model,
    sequences: &[TokenizedSequence],
    vocab: &Vocab,
    weights: DistillWeights,
    mask_rate: f64,
    seed: u64,
) -> Result<crate::objectives::DistillValues> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<&TokenizedSequence> = sequences
        .iter()
        .filter(|q| !maskable_positions(q, vocab).is_empty())
        .collect();
    if seqs.is_empty() {
        return Err(Error::Dataset("no sequence has a maskable token".into()));
    }
    let mut sum = [0.0; 4];
    for q in &seqs {
        let (masked, plans) = dynamic_mask(std::slice::from_ref(*q), vocab, mask_rate, &mut rng)?;
        let positions = plans[0].positions();
        let (t_logits, t_hidden) = teacher_targets(teacher, &masked[0], &positions)?;
        let mut f = Forward::eval(student);
        let hidden = f.encode(&masked[0])?;
        let s_hidden = f.graph.gather_rows(hidden, &positions)?;
        let s_logits = f.mlm_logits_from_hidden(hidden, &masked[0], &positions)?;
        let v = crate::objectives::distillation_loss_values(
            f.graph.value(s_logits),
            &t_logits,
            f.graph.value(s_hidden),
            &t_hidden,
            &plans[0].original_ids(),
            weights,
        )?;
        for (acc, x) in sum.iter_mut().zip([v.mlm, v.cosine, v.kd, v.total]) {
            *acc += x;
        }
    }
    let n = seqs.len() as f64;
    Ok(crate::objectives::DistillValues {
        mlm: sum[0] / n,
        cosine: sum[1] / n,
        kd: sum[2] / n,
        total: sum[3] / n,
    })
}

/// Scores every example once, without dropout.
pub fn evaluate(model: &Model, data: &[LabeledSequence], threshold: f64) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let seqs: Vec<TokenizedSequence> = data.iter().map(|e| e.seq.clone()).collect();
    let labels: Vec<f64> = data.iter().map(|e| e.label).collect();
    let scores = forward_classify(model, &seqs)?;
    metrics_report(&scores, &labels, threshold)
}

/// Mean BCE of the classifier on `data`, evaluation mode.
pub fn classification_loss(model: &Model, data: &[LabeledSequence]) -> Result<f64> {
    let seqs: Vec<TokenizedSequence> = data.iter().map(|e| e.seq.clone()).collect();
    let labels: Vec<f64> = data.iter().map(|e| e.label).collect();
    let scores = forward_classify(model, &seqs)?;
    let mut g = Graph::new();
    let p = g.constant(crate::tensor::Tensor::vector(scores)?);
    let l = bce_loss(&mut g, p, &labels)?;
    g.value(l).item()
}
