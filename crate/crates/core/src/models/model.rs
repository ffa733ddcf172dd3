use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, PositionalMode};
use crate::error::{invalid, Error, Result};
use crate::layers::{
    encoder_block, glorot_uniform, positional_encoding, Dropout, EncoderBlockParams, FfnParams,
    LayerNormParams, MhaParams, MultiHeadConfig,
};
use crate::tensor::{Binder, Checkpoint, GradMap, Graph, ParamStore, Tensor, Var};
use crate::tokenizer::{TokenizedSequence, Vocab};

const CHECKPOINT_KIND: &str = "insincere-encoder";

/// Parameter groups used for counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    WordEmbedding,
    PositionEmbedding,
    TokenTypeEmbedding,
    EmbeddingNorm,
    Encoder,
    Pooler,
    Classifier,
    MlmHead,
    PairHead,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        let group = if name.starts_with("embeddings.word.") || name.starts_with("embeddings.projection.") {
            ParamGroup::WordEmbedding
        } else if name.starts_with("embeddings.position.") {
            ParamGroup::PositionEmbedding
        } else if name.starts_with("embeddings.token_type.") {
            ParamGroup::TokenTypeEmbedding
        } else if name.starts_with("embeddings.norm.") {
            ParamGroup::EmbeddingNorm
        } else if name.starts_with("encoder.") {
            ParamGroup::Encoder
        } else if name.starts_with("pooler.") {
            ParamGroup::Pooler
        } else if name.starts_with("classifier.") {
            ParamGroup::Classifier
        } else if name.starts_with("mlm_head.") {
            ParamGroup::MlmHead
        } else if name.starts_with("pair_head.") {
            ParamGroup::PairHead
        } else {
            return None;
        };
        Some(group)
    }
}

/// Encoder classifier with token, pretraining and pair heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    sinusoid: Option<Tensor>,
}

fn attention_scope(config: &ModelConfig, layer: usize) -> String {
    if config.sharing.shares_attention() {
        "encoder.shared".to_string()
    } else {
        format!("encoder.layer{layer}")
    }
}

fn ffn_scope(config: &ModelConfig, layer: usize) -> String {
    if config.sharing.shares_ffn() {
        "encoder.shared".to_string()
    } else {
        format!("encoder.layer{layer}")
    }
}

/// Builds a model with deterministic initialization: uniform
/// `±sqrt(6 / (fan_in + fan_out))` for matrices, zero biases, unit norm gains.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let (v, e, h, f) = (
        config.vocab_size,
        config.embedding_size,
        config.hidden_size,
        config.ff_size,
    );
    let mut matrix = |params: &mut ParamStore, name: &str, r: usize, c: usize| -> Result<()> {
        params.insert(name, glorot_uniform(r, c, &mut rng)?);
        Ok(())
    };
    let zeros = |params: &mut ParamStore, name: &str, n: usize| -> Result<()> {
        params.insert(name, Tensor::zeros(vec![n])?);
        Ok(())
    };
    let norm = |params: &mut ParamStore, scope: &str| -> Result<()> {
        params.insert(format!("{scope}.gain"), Tensor::full(vec![h], 1.0)?);
        params.insert(format!("{scope}.bias"), Tensor::zeros(vec![h])?);
        Ok(())
    };

    matrix(&mut params, "embeddings.word.weight", v, e)?;
    if config.is_factorized() {
        matrix(&mut params, "embeddings.projection.weight", e, h)?;
    }
    if config.positional == PositionalMode::Learned {
        matrix(&mut params, "embeddings.position.weight", config.max_len, h)?;
    }
    if config.use_token_type_embeddings {
        matrix(&mut params, "embeddings.token_type.weight", 2, h)?;
    }
    norm(&mut params, "embeddings.norm")?;

    for layer in 0..config.num_layers {
        let att = attention_scope(&config, layer);
        if !params.contains(&format!("{att}.attention.query.weight")) {
            for proj in ["query", "key", "value", "output"] {
                matrix(&mut params, &format!("{att}.attention.{proj}.weight"), h, h)?;
                zeros(&mut params, &format!("{att}.attention.{proj}.bias"), h)?;
            }
            norm(&mut params, &format!("{att}.attention_norm"))?;
        }
        let ffn = ffn_scope(&config, layer);
        if !params.contains(&format!("{ffn}.ffn.inner.weight")) {
            matrix(&mut params, &format!("{ffn}.ffn.inner.weight"), h, f)?;
            zeros(&mut params, &format!("{ffn}.ffn.inner.bias"), f)?;
            matrix(&mut params, &format!("{ffn}.ffn.outer.weight"), f, h)?;
            zeros(&mut params, &format!("{ffn}.ffn.outer.bias"), h)?;
            norm(&mut params, &format!("{ffn}.ffn_norm"))?;
        }
    }

    if config.use_pooler {
        matrix(&mut params, "pooler.weight", h, h)?;
        zeros(&mut params, "pooler.bias", h)?;
    }
    matrix(&mut params, "classifier.weight", h, 1)?;
    zeros(&mut params, "classifier.bias", 1)?;
    matrix(&mut params, "mlm_head.weight", h, v)?;
    zeros(&mut params, "mlm_head.bias", v)?;
    matrix(&mut params, "pair_head.weight", h, 1)?;
    zeros(&mut params, "pair_head.bias", 1)?;

    Model::assemble(config, params)
}

impl Model {
    fn assemble(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let sinusoid = match config.positional {
            PositionalMode::Sinusoidal => Some(positional_encoding(config.max_len, config.hidden_size)?),
            PositionalMode::Learned => None,
        };
        Ok(Model {
            config,
            params,
            sinusoid,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.element_count()
    }

    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| ParamGroup::of(name) == Some(group))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Name of the parameter `leaf` (e.g. `attention.query.weight`) used by
    /// encoder layer `layer`, after resolving sharing.
    pub fn layer_param_name(&self, layer: usize, leaf: &str) -> String {
        let scope = if leaf.starts_with("attention") {
            attention_scope(&self.config, layer)
        } else {
            ffn_scope(&self.config, layer)
        };
        format!("{scope}.{leaf}")
    }

    pub fn to_checkpoint(&self, vocab: Option<&Vocab>) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.metadata.insert("kind".into(), CHECKPOINT_KIND.into());
        ck.metadata.insert("config".into(), self.config.to_kv_text());
        if let Some(v) = vocab {
            ck.metadata.insert("vocab".into(), v.to_text());
        }
        for (name, t) in self.params.iter() {
            ck.tensors.insert(name.to_string(), t.clone().with_requires_grad(false));
        }
        ck
    }

    /// Restores a model (and its embedded vocabulary, when present). Every
    /// expected parameter must be present with the expected shape.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Model, Option<Vocab>)> {
        if ck.metadata.get("kind").map(String::as_str) != Some(CHECKPOINT_KIND) {
            return Err(Error::Checkpoint("not an encoder checkpoint".into()));
        }
        let config_text = ck
            .metadata
            .get("config")
            .ok_or_else(|| Error::Checkpoint("missing config".into()))?;
        let config = ModelConfig::from_kv_text(config_text)?;
        let skeleton = build_model(config.clone(), 0)?;
        let mut params = ParamStore::new();
        for (name, expected) in skeleton.params.iter() {
            let t = ck
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != expected.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
            params.insert(name, t.clone());
        }
        if ck.tensors.len() != params.len() {
            return Err(Error::Checkpoint("checkpoint has unexpected extra tensors".into()));
        }
        let vocab = ck.metadata.get("vocab").map(|t| Vocab::from_text(t)).transpose()?;
        if let Some(v) = &vocab {
            if v.len() != config.vocab_size {
                return Err(Error::Checkpoint(format!(
                    "embedded vocabulary has {} tokens, config expects {}",
                    v.len(),
                    config.vocab_size
                )));
            }
        }
        Ok((Model::assemble(config, params)?, vocab))
    }
}

pub fn param_count(model: &Model) -> usize {
    model.param_count()
}

/// One forward pass over a model: owns the graph, the parameter bindings and
/// the dropout stream.
pub struct Forward<'m> {
    model: &'m Model,
    pub graph: Graph,
    binder: Binder,
    dropout: Dropout,
}

impl<'m> Forward<'m> {
    /// No gradients, no dropout.
    pub fn eval(model: &'m Model) -> Self {
        Forward {
            model,
            graph: Graph::new(),
            binder: Binder::new(false),
            dropout: Dropout::disabled(),
        }
    }

    /// Gradients on, dropout off.
    pub fn with_grad(model: &'m Model) -> Self {
        Forward {
            binder: Binder::new(true),
            ..Self::eval(model)
        }
    }

    /// Gradients on, dropout at the configured rate driven by `seed`.
    pub fn train(model: &'m Model, seed: u64) -> Result<Self> {
        let dropout = Dropout::new(model.config.dropout_rate, ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Forward {
            model,
            graph: Graph::new(),
            binder: Binder::new(true),
            dropout,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.binder.bind(&mut self.graph, &self.model.params, name)
    }

    pub fn bound(&self, name: &str) -> Option<Var> {
        self.binder.var(name)
    }

    fn norm(&mut self, scope: &str) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gain: self.param(&format!("{scope}.gain"))?,
            bias: self.param(&format!("{scope}.bias"))?,
        })
    }

    fn block_params(&mut self, layer: usize) -> Result<EncoderBlockParams> {
        let att = attention_scope(&self.model.config, layer);
        let ffn = ffn_scope(&self.model.config, layer);
        let mut p = |s: String| self.param(&s);
        let attention = MhaParams {
            w_q: p(format!("{att}.attention.query.weight"))?,
            b_q: p(format!("{att}.attention.query.bias"))?,
            w_k: p(format!("{att}.attention.key.weight"))?,
            b_k: p(format!("{att}.attention.key.bias"))?,
            w_v: p(format!("{att}.attention.value.weight"))?,
            b_v: p(format!("{att}.attention.value.bias"))?,
            w_o: p(format!("{att}.attention.output.weight"))?,
            b_o: p(format!("{att}.attention.output.bias"))?,
        };
        let ffn_params = FfnParams {
            w1: p(format!("{ffn}.ffn.inner.weight"))?,
            b1: p(format!("{ffn}.ffn.inner.bias"))?,
            w2: p(format!("{ffn}.ffn.outer.weight"))?,
            b2: p(format!("{ffn}.ffn.outer.bias"))?,
        };
        Ok(EncoderBlockParams {
            attention,
            attention_norm: self.norm(&format!("{att}.attention_norm"))?,
            ffn: ffn_params,
            ffn_norm: self.norm(&format!("{ffn}.ffn_norm"))?,
        })
    }

    fn check_sequence(&self, seq: &TokenizedSequence) -> Result<()> {
        let cfg = &self.model.config;
        let n = seq.ids.len();
        if n == 0 || n > cfg.max_len {
            return Err(invalid(format!(
                "sequence length {n} outside 1..={} for this model",
                cfg.max_len
            )));
        }
        if seq.attention_mask.len() != n || seq.segment_ids.len() != n {
            return Err(invalid("ids, attention mask and segment ids differ in length"));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        if seq.segment_ids.iter().any(|&s| s > 1) {
            return Err(invalid("segment ids must be 0 or 1"));
        }
        Ok(())
    }

    /// Final encoder states, `[len, hidden]` for a sequence of up to
    /// `max_len` positions. Padding positions are masked out as attention keys.
    pub fn encode(&mut self, seq: &TokenizedSequence) -> Result<Var> {
        self.check_sequence(seq)?;
        let cfg = self.model.config.clone();
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();

        let word = self.param("embeddings.word.weight")?;
        let mut x = self.graph.gather_rows(word, &ids)?;
        if cfg.is_factorized() {
            let proj = self.param("embeddings.projection.weight")?;
            x = self.graph.matmul(x, proj)?;
        }
        let n = ids.len();
        let pos = match &self.model.sinusoid {
            Some(table) => {
                let rows = table.values()[..n * cfg.hidden_size].to_vec();
                self.graph.constant(Tensor::new(vec![n, cfg.hidden_size], rows)?)
            }
            None => {
                let table = self.param("embeddings.position.weight")?;
                if n == cfg.max_len {
                    table
                } else {
                    self.graph.slice(table, 0, 0, n)?
                }
            }
        };
        x = self.graph.add(x, pos)?;
        if cfg.use_token_type_embeddings {
            let table = self.param("embeddings.token_type.weight")?;
            let segs: Vec<usize> = seq.segment_ids.iter().map(|&s| s as usize).collect();
            let types = self.graph.gather_rows(table, &segs)?;
            x = self.graph.add(x, types)?;
        }
        let norm = self.norm("embeddings.norm")?;
        x = self.graph.layer_norm(x, norm.gain, norm.bias, cfg.layer_norm_eps)?;
        x = self.dropout.apply(&mut self.graph, x)?;

        let mask: Vec<bool> = seq.attention_mask.iter().map(|&m| m == 1).collect();
        let heads = MultiHeadConfig::new(cfg.hidden_size, cfg.num_heads)?;
        for layer in 0..cfg.num_layers {
            let p = self.block_params(layer)?;
            x = encoder_block(
                &mut self.graph,
                x,
                &p,
                &heads,
                cfg.activation,
                cfg.layer_norm_eps,
                Some(&mask),
                &mut self.dropout,
            )?;
        }
        Ok(x)
    }

    /// `[CLS]` state, passed through `tanh(x·W + b)` when the pooler is enabled.
    pub fn cls_representation(&mut self, hidden: Var) -> Result<Var> {
        let cls = self.graph.slice(hidden, 0, 0, 1)?;
        if !self.model.config.use_pooler {
            return Ok(cls);
        }
        let w = self.param("pooler.weight")?;
        let b = self.param("pooler.bias")?;
        let z = self.graph.matmul(cls, w)?;
        let z = self.graph.add_bias(z, b)?;
        self.graph.tanh(z)
    }

    fn head_logit(&mut self, pooled: Var, head: &str) -> Result<Var> {
        let w = self.param(&format!("{head}.weight"))?;
        let b = self.param(&format!("{head}.bias"))?;
        let z = self.graph.matmul(pooled, w)?;
        self.graph.add_bias(z, b)
    }

    /// Single classification logit, `[1, 1]`.
    pub fn classify_logit(&mut self, seq: &TokenizedSequence) -> Result<Var> {
        let hidden = self.encode(seq)?;
        let pooled = self.cls_representation(hidden)?;
        self.head_logit(pooled, "classifier")
    }

    /// Next-sentence / sentence-order logit, `[1, 1]`.
    pub fn pair_logit(&mut self, seq: &TokenizedSequence) -> Result<Var> {
        let second = seq
            .segment_ids
            .iter()
            .zip(&seq.attention_mask)
            .any(|(&s, &m)| s == 1 && m == 1);
        if !second {
            return Err(invalid("pair input carries no second-segment ids"));
        }
        let hidden = self.encode(seq)?;
        self.pair_logit_from_hidden(hidden)
    }

    /// Pair-head logit from already computed encoder states.
    pub fn pair_logit_from_hidden(&mut self, hidden: Var) -> Result<Var> {
        let pooled = self.cls_representation(hidden)?;
        self.head_logit(pooled, "pair_head")
    }

    /// Vocabulary logits `[positions, vocab]` read from encoder states.
    pub fn mlm_logits_from_hidden(
        &mut self,
        hidden: Var,
        seq: &TokenizedSequence,
        positions: &[usize],
    ) -> Result<Var> {
        if positions.is_empty() {
            return Err(invalid("no masked positions"));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= seq.original_length) {
            return Err(invalid(format!(
                "masked position {p} outside the {} real tokens",
                seq.original_length
            )));
        }
        let picked = self.graph.gather_rows(hidden, positions)?;
        let w = self.param("mlm_head.weight")?;
        let b = self.param("mlm_head.bias")?;
        let z = self.graph.matmul(picked, w)?;
        self.graph.add_bias(z, b)
    }

    pub fn mlm_logits(&mut self, seq: &TokenizedSequence, positions: &[usize]) -> Result<Var> {
        if let Some(&p) = positions.iter().find(|&&p| p >= seq.original_length) {
            return Err(invalid(format!(
                "masked position {p} outside the {} real tokens",
                seq.original_length
            )));
        }
        let hidden = self.encode(seq)?;
        self.mlm_logits_from_hidden(hidden, seq, positions)
    }

    /// Runs backward from `loss` and returns parameter gradients by name.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap> {
        self.graph.backward(loss)?;
        Ok(self.binder.grads(&self.graph))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Probability of the positive class for each sequence, in evaluation mode.
pub fn forward_classify(model: &Model, batch: &[TokenizedSequence]) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|seq| {
            let mut f = Forward::eval(model);
            let z = f.classify_logit(seq)?;
            Ok(sigmoid(f.graph.value(z).item()?))
        })
        .collect()
}

/// Vocabulary logits at the given positions of each sequence.
pub fn forward_mlm(
    model: &Model,
    batch: &[TokenizedSequence],
    positions: &[Vec<usize>],
) -> Result<Vec<Tensor>> {
    if batch.len() != positions.len() {
        return Err(invalid("one position list per sequence required"));
    }
    batch
        .iter()
        .zip(positions)
        .map(|(seq, pos)| {
            let mut f = Forward::eval(model);
            let z = f.mlm_logits(seq, pos)?;
            Ok(f.graph.value(z).clone())
        })
        .collect()
}

/// Probability that segment B legitimately follows segment A.
pub fn forward_pair_classify(model: &Model, batch: &[TokenizedSequence]) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|seq| {
            let mut f = Forward::eval(model);
            let z = f.pair_logit(seq)?;
            Ok(sigmoid(f.graph.value(z).item()?))
        })
        .collect()
}
