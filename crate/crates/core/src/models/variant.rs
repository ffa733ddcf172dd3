use std::fmt;
use std::str::FromStr;

use super::config::{derive_student_config, ModelConfig, SharingMode};
use crate::error::{invalid, Error, Result};

/// How masked-LM inputs are refreshed across epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskingStrategy {
    /// A fixed number of precomputed masks, cycled by epoch.
    Static { num_masks: usize },
    /// A fresh mask every time a sequence is seen.
    Dynamic,
}

/// Sentence-pair objective trained alongside masked LM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairObjective {
    Nsp,
    Sop,
}

/// Model family. Each family fixes architecture switches and its
/// pretraining recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Bert,
    Roberta,
    DistilBert,
    Albert,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Bert,
        Variant::Roberta,
        Variant::DistilBert,
        Variant::Albert,
    ];

    /// Adapts a BERT-shaped base config to this family.
    pub fn config(self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        match self {
            Variant::Bert => {}
            Variant::Roberta => cfg.use_token_type_embeddings = false,
            Variant::DistilBert => cfg = derive_student_config(base)?,
            Variant::Albert => {
                cfg.sharing = SharingMode::All;
                cfg.embedding_size = (base.hidden_size / 4).max(1);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn masking(self) -> MaskingStrategy {
        match self {
            Variant::Bert | Variant::Albert => MaskingStrategy::Static { num_masks: 1 },
            Variant::Roberta | Variant::DistilBert => MaskingStrategy::Dynamic,
        }
    }

    pub fn pair_objective(self) -> Option<PairObjective> {
        match self {
            Variant::Bert => Some(PairObjective::Nsp),
            Variant::Albert => Some(PairObjective::Sop),
            Variant::Roberta | Variant::DistilBert => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Bert => "bert",
            Variant::Roberta => "roberta",
            Variant::DistilBert => "distilbert",
            Variant::Albert => "albert",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bert" => Ok(Variant::Bert),
            "roberta" => Ok(Variant::Roberta),
            "distilbert" => Ok(Variant::DistilBert),
            "albert" => Ok(Variant::Albert),
            other => Err(invalid(format!("unknown model family {other:?}"))),
        }
    }
}
