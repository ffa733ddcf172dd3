use rand::seq::index::sample;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::tokenizer::{TokenizedSequence, Vocab};

pub const DEFAULT_MASK_RATE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskEntry {
    pub position: usize,
    pub action: MaskAction,
    pub original_id: u32,
    pub replacement_id: u32,
}

/// Corruption applied to one sequence, sorted by position.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskPlan {
    pub entries: Vec<MaskEntry>,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    pub fn original_ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.original_id).collect()
    }

    /// The corrupted input the model sees.
    pub fn apply(&self, seq: &TokenizedSequence) -> Result<TokenizedSequence> {
        let mut out = seq.clone();
        for e in &self.entries {
            let slot = out
                .ids
                .get_mut(e.position)
                .ok_or_else(|| invalid(format!("mask position {} out of range", e.position)))?;
            if *slot != e.original_id {
                return Err(invalid(format!(
                    "mask plan expects id {} at position {}, found {}",
                    e.original_id, e.position, slot
                )));
            }
            *slot = e.replacement_id;
        }
        Ok(out)
    }
}

/// Real, non-special positions of a sequence.
pub fn maskable_positions(seq: &TokenizedSequence, vocab: &Vocab) -> Vec<usize> {
    seq.ids
        .iter()
        .zip(&seq.attention_mask)
        .enumerate()
        .filter(|(_, (&id, &m))| m == 1 && !vocab.is_special(id))
        .map(|(i, _)| i)
        .collect()
}

fn random_replacement(original: u32, ordinary: &[u32], rng: &mut impl Rng) -> u32 {
    if ordinary.len() < 2 {
        return ordinary.first().copied().unwrap_or(original);
    }
    loop {
        let id = ordinary[rng.gen_range(0..ordinary.len())];
        if id != original {
            return id;
        }
    }
}

fn plan_with(
    seq: &TokenizedSequence,
    vocab: &Vocab,
    ordinary: &[u32],
    rate: f64,
    rng: &mut impl Rng,
) -> Result<MaskPlan> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(invalid(format!("mask rate must be in (0, 1), got {rate}")));
    }
    let candidates = maskable_positions(seq, vocab);
    if candidates.is_empty() {
        return Err(invalid("sequence has no maskable tokens"));
    }
    let k = ((rate * candidates.len() as f64).round() as usize).max(1);
    let mut chosen: Vec<usize> = sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    chosen.sort_unstable();
    let entries = chosen
        .into_iter()
        .map(|position| {
            let original_id = seq.ids[position];
            let draw: f64 = rng.gen();
            let (action, replacement_id) = if draw < 0.8 {
                (MaskAction::Mask, vocab.mask_id())
            } else if draw < 0.9 {
                (MaskAction::Random, random_replacement(original_id, ordinary, rng))
            } else {
                (MaskAction::Keep, original_id)
            };
            MaskEntry {
                position,
                action,
                original_id,
                replacement_id,
            }
        })
        .collect();
    Ok(MaskPlan { entries })
}

/// Picks `max(1, round(rate * n))` of the `n` maskable positions uniformly
/// without replacement; each becomes `[MASK]` (80%), a random ordinary token
/// other than the original (10%) or stays unchanged (10%).
pub fn select_mask_positions(
    seq: &TokenizedSequence,
    vocab: &Vocab,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<MaskPlan> {
    let ordinary = vocab.ordinary_ids();
    plan_with(seq, vocab, &ordinary, rate, rng)
}

/// Precomputed masks: `num_masks` plans per sequence, reused on a cycle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StaticMasks {
    /// `plans[copy][sequence]`
    plans: Vec<Vec<MaskPlan>>,
}

impl StaticMasks {
    pub fn num_masks(&self) -> usize {
        self.plans.len()
    }

    pub fn copy_index(&self, epoch: usize) -> usize {
        epoch % self.plans.len()
    }

    pub fn plans_for_epoch(&self, epoch: usize) -> &[MaskPlan] {
        &self.plans[self.copy_index(epoch)]
    }

    pub fn plan_for(&self, epoch: usize, sequence: usize) -> Option<&MaskPlan> {
        self.plans_for_epoch(epoch).get(sequence)
    }

    /// Every masked copy of the dataset.
    pub fn copies(&self, dataset: &[TokenizedSequence]) -> Result<Vec<Vec<TokenizedSequence>>> {
        self.plans
            .iter()
            .map(|plans| {
                plans
                    .iter()
                    .zip(dataset)
                    .map(|(p, s)| p.apply(s))
                    .collect()
            })
            .collect()
    }
}

pub fn generate_static_masks(
    dataset: &[TokenizedSequence],
    vocab: &Vocab,
    num_masks: usize,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<StaticMasks> {
    if num_masks == 0 {
        return Err(invalid("num_masks must be at least 1"));
    }
    let ordinary = vocab.ordinary_ids();
    let plans = (0..num_masks)
        .map(|_| {
            dataset
                .iter()
                .map(|s| plan_with(s, vocab, &ordinary, rate, rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StaticMasks { plans })
}

/// Fresh plans for every sequence of the batch.
pub fn dynamic_mask(
    batch: &[TokenizedSequence],
    vocab: &Vocab,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<TokenizedSequence>, Vec<MaskPlan>)> {
    let ordinary = vocab.ordinary_ids();
    let mut masked = Vec::with_capacity(batch.len());
    let mut plans = Vec::with_capacity(batch.len());
    for s in batch {
        let plan = plan_with(s, vocab, &ordinary, rate, rng)?;
        masked.push(plan.apply(s)?);
        plans.push(plan);
    }
    Ok((masked, plans))
}
