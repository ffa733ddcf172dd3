use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::Activation;

/// Which encoder sublayers are stored once and reused by every layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SharingMode {
    #[default]
    None,
    FfnOnly,
    AttentionOnly,
    All,
}

impl SharingMode {
    pub fn shares_attention(self) -> bool {
        matches!(self, SharingMode::AttentionOnly | SharingMode::All)
    }

    pub fn shares_ffn(self) -> bool {
        matches!(self, SharingMode::FfnOnly | SharingMode::All)
    }
}

impl fmt::Display for SharingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SharingMode::None => "none",
            SharingMode::FfnOnly => "ffn_only",
            SharingMode::AttentionOnly => "attention_only",
            SharingMode::All => "all",
        })
    }
}

impl FromStr for SharingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SharingMode::None),
            "ffn_only" => Ok(SharingMode::FfnOnly),
            "attention_only" => Ok(SharingMode::AttentionOnly),
            "all" => Ok(SharingMode::All),
            other => Err(Error::Config(format!("unknown sharing mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PositionalMode {
    #[default]
    Learned,
    Sinusoidal,
}

impl fmt::Display for PositionalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionalMode::Learned => "learned",
            PositionalMode::Sinusoidal => "sinusoidal",
        })
    }
}

impl FromStr for PositionalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(PositionalMode::Learned),
            "sinusoidal" => Ok(PositionalMode::Sinusoidal),
            other => Err(Error::Config(format!("unknown positional mode {other:?}"))),
        }
    }
}

/// Encoder architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    pub vocab_size: usize,
    /// Equal to `hidden_size` unless the embedding is factorized.
    pub embedding_size: usize,
    pub max_len: usize,
    pub sharing: SharingMode,
    pub use_token_type_embeddings: bool,
    pub use_pooler: bool,
    pub positional: PositionalMode,
    pub dropout_rate: f64,
    pub activation: Activation,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Small encoder suitable for desk-scale experiments.
    pub fn tiny(vocab_size: usize, max_len: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_size: 32,
            num_heads: 2,
            ff_size: 128,
            vocab_size,
            embedding_size: 32,
            max_len,
            sharing: SharingMode::None,
            use_token_type_embeddings: true,
            use_pooler: true,
            positional: PositionalMode::Learned,
            dropout_rate: 0.1,
            activation: Activation::Gelu,
            layer_norm_eps: 1e-12,
        }
    }

    /// 12 layers, hidden 768, 12 heads.
    pub fn bert_base(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            ff_size: 3072,
            embedding_size: 768,
            max_len: 192,
            ..Self::tiny(vocab_size, 192)
        }
    }

    /// 24 layers, hidden 1024, 16 heads.
    pub fn bert_large(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 24,
            hidden_size: 1024,
            num_heads: 16,
            ff_size: 4096,
            embedding_size: 1024,
            ..Self::bert_base(vocab_size)
        }
    }

    pub fn is_factorized(&self) -> bool {
        self.embedding_size < self.hidden_size
    }

    /// Checks every structural constraint and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_layers < 1 {
            problems.push("num_layers must be at least 1".to_string());
        }
        if self.hidden_size == 0 {
            problems.push("hidden_size must be positive".to_string());
        }
        if self.num_heads == 0 || (self.hidden_size > 0 && !self.hidden_size.is_multiple_of(self.num_heads)) {
            problems.push(format!(
                "num_heads ({}) must divide hidden_size ({})",
                self.num_heads, self.hidden_size
            ));
        }
        if self.embedding_size == 0 || self.embedding_size > self.hidden_size {
            problems.push(format!(
                "embedding_size ({}) must be in 1..=hidden_size ({})",
                self.embedding_size, self.hidden_size
            ));
        }
        if self.ff_size == 0 {
            problems.push("ff_size must be positive".to_string());
        }
        if self.vocab_size < 6 {
            problems.push(format!(
                "vocab_size ({}) must cover the five special tokens plus at least one word",
                self.vocab_size
            ));
        }
        if self.max_len < 3 {
            problems.push(format!("max_len ({}) must be at least 3", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!("dropout_rate ({}) must be in [0, 1)", self.dropout_rate));
        }
        if !(self.layer_norm_eps > 0.0) {
            problems.push("layer_norm_eps must be positive".to_string());
        }
        if self.positional == PositionalMode::Sinusoidal && !self.hidden_size.is_multiple_of(2) {
            problems.push("sinusoidal positions need an even hidden_size".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Flat `key=value` lines.
    pub fn to_kv_text(&self) -> String {
        let lines = [
            format!("num_layers={}", self.num_layers),
            format!("hidden_size={}", self.hidden_size),
            format!("num_heads={}", self.num_heads),
            format!("ff_size={}", self.ff_size),
            format!("vocab_size={}", self.vocab_size),
            format!("embedding_size={}", self.embedding_size),
            format!("max_len={}", self.max_len),
            format!("sharing={}", self.sharing),
            format!("use_token_type_embeddings={}", self.use_token_type_embeddings),
            format!("use_pooler={}", self.use_pooler),
            format!("positional={}", self.positional),
            format!("dropout_rate={:?}", self.dropout_rate),
            format!("activation={}", self.activation),
            format!("layer_norm_eps={:?}", self.layer_norm_eps),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::tiny(0, 0);
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |e: String| Error::Config(format!("line {}: {k}: {e}", i + 1));
            let num = |v: &str| v.parse::<usize>().map_err(|e| bad(e.to_string()));
            let flag = |v: &str| v.parse::<bool>().map_err(|e| bad(e.to_string()));
            let real = |v: &str| v.parse::<f64>().map_err(|e| bad(e.to_string()));
            match k {
                "num_layers" => cfg.num_layers = num(v)?,
                "hidden_size" => cfg.hidden_size = num(v)?,
                "num_heads" => cfg.num_heads = num(v)?,
                "ff_size" => cfg.ff_size = num(v)?,
                "vocab_size" => cfg.vocab_size = num(v)?,
                "embedding_size" => cfg.embedding_size = num(v)?,
                "max_len" => cfg.max_len = num(v)?,
                "sharing" => cfg.sharing = v.parse()?,
                "use_token_type_embeddings" => cfg.use_token_type_embeddings = flag(v)?,
                "use_pooler" => cfg.use_pooler = flag(v)?,
                "positional" => cfg.positional = v.parse()?,
                "dropout_rate" => cfg.dropout_rate = real(v)?,
                "activation" => cfg.activation = v.parse()?,
                "layer_norm_eps" => cfg.layer_norm_eps = real(v)?,
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", i + 1))),
            }
            seen.insert(k.to_string());
        }
        for required in ["num_layers", "hidden_size", "num_heads", "vocab_size", "max_len"] {
            if !seen.contains(required) {
                return Err(Error::Config(format!("missing key {required}")));
            }
        }
        if !seen.contains("embedding_size") {
            cfg.embedding_size = cfg.hidden_size;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Closed-form parameter count per group.
    pub fn param_breakdown(&self) -> ParamBreakdown {
        let (v, e, h, f, l) = (
            self.vocab_size,
            self.embedding_size,
            self.hidden_size,
            self.ff_size,
            self.num_layers,
        );
        let word = v * e + if self.is_factorized() { e * h } else { 0 };
        let attention = 4 * (h * h + h) + 2 * h;
        let ffn = h * f + f + f * h + h + 2 * h;
        let att_copies = if self.sharing.shares_attention() { 1 } else { l };
        let ffn_copies = if self.sharing.shares_ffn() { 1 } else { l };
        ParamBreakdown {
            word_embedding: word,
            position_embedding: match self.positional {
                PositionalMode::Learned => self.max_len * h,
                PositionalMode::Sinusoidal => 0,
            },
            token_type_embedding: if self.use_token_type_embeddings { 2 * h } else { 0 },
            embedding_norm: 2 * h,
            encoder: att_copies * attention + ffn_copies * ffn,
            pooler: if self.use_pooler { h * h + h } else { 0 },
            classifier: h + 1,
            mlm_head: h * v + v,
            pair_head: h + 1,
        }
    }
}

/// Parameter totals per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    /// Token table plus the factorization projection, when present.
    pub word_embedding: usize,
    pub position_embedding: usize,
    pub token_type_embedding: usize,
    pub embedding_norm: usize,
    pub encoder: usize,
    pub pooler: usize,
    pub classifier: usize,
    pub mlm_head: usize,
    pub pair_head: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.word_embedding
            + self.position_embedding
            + self.token_type_embedding
            + self.embedding_norm
            + self.encoder
            + self.pooler
            + self.classifier
            + self.mlm_head
            + self.pair_head
    }
}

/// DistilBERT-style student: half the layers, no token-type embeddings and
/// no pooler, every other dimension unchanged.
pub fn derive_student_config(teacher: &ModelConfig) -> Result<ModelConfig> {
    if teacher.num_layers == 0 || !teacher.num_layers.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "student derivation needs an even teacher layer count, got {}",
            teacher.num_layers
        )));
    }
    Ok(ModelConfig {
        num_layers: teacher.num_layers / 2,
        use_token_type_embeddings: false,
        use_pooler: false,
        ..teacher.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::bert_base(30_522).validate().unwrap();
        ModelConfig::bert_large(30_522).validate().unwrap();
        let base = ModelConfig::bert_base(30_522);
        assert_eq!((base.num_layers, base.hidden_size, base.num_heads), (12, 768, 12));
        let large = ModelConfig::bert_large(30_522);
        assert_eq!((large.num_layers, large.hidden_size, large.num_heads), (24, 1024, 16));
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut cfg = ModelConfig::tiny(100, 16);
        cfg.num_heads = 3;
        cfg.embedding_size = 64;
        cfg.max_len = 2;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("num_heads"), "{msg}");
        assert!(msg.contains("embedding_size"), "{msg}");
        assert!(msg.contains("max_len"), "{msg}");
        cfg = ModelConfig::tiny(100, 16);
        cfg.num_layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::tiny(321, 24);
        cfg.sharing = SharingMode::AttentionOnly;
        cfg.embedding_size = 8;
        cfg.positional = PositionalMode::Sinusoidal;
        cfg.dropout_rate = 0.3;
        let back = ModelConfig::from_kv_text(&cfg.to_kv_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(ModelConfig::from_kv_text("num_layers=2\nbogus=1").is_err());
    }

    #[test]
    fn factorized_embedding_arithmetic() {
        let mut cfg = ModelConfig::tiny(1000, 16);
        cfg.hidden_size = 64;
        cfg.num_heads = 4;
        cfg.embedding_size = 16;
        assert_eq!(cfg.param_breakdown().word_embedding, 17_024);
        cfg.embedding_size = 64;
        assert_eq!(cfg.param_breakdown().word_embedding, 64_000);
    }

    #[test]
    fn student_rules() {
        let t = ModelConfig::bert_base(30_522);
        let s = derive_student_config(&t).unwrap();
        assert_eq!(s.num_layers, 6);
        assert!(!s.use_token_type_embeddings && !s.use_pooler);
        assert_eq!((s.hidden_size, s.num_heads, s.ff_size), (768, 12, 3072));
        let mut two = ModelConfig::tiny(50, 8);
        two.num_layers = 2;
        assert_eq!(derive_student_config(&two).unwrap().num_layers, 1);
        two.num_layers = 3;
        assert!(derive_student_config(&two).is_err());
    }
}
