//! Pretraining objectives: masked-LM corruption, sentence-pair sampling and
//! the training losses.

mod losses;
mod masking;
mod pairs;

pub use losses::{
    bce_loss, bce_loss_values, distillation_losses, distillation_loss_values, mlm_loss,
    mlm_loss_values, DistillLosses, DistillValues, DistillWeights, PROB_CLAMP,
};
pub use masking::{
    dynamic_mask, generate_static_masks, maskable_positions, select_mask_positions, MaskAction,
    MaskEntry, MaskPlan, StaticMasks, DEFAULT_MASK_RATE,
};
pub use pairs::{encode_pairs, sample_nsp_pairs, sample_sop_pairs, Corpus, SentencePair};
