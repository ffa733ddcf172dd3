use proptest::prelude::*;

use super::*;
use crate::tensor::Checkpoint;
use crate::tokenizer::TokenizedSequence;

fn small(vocab: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_size: 8,
        num_heads: 2,
        ff_size: 16,
        embedding_size: 8,
        dropout_rate: 0.0,
        ..ModelConfig::tiny(vocab, max_len)
    }
}

fn seq(ids: &[u32], max_len: usize) -> TokenizedSequence {
    let n = ids.len();
    let mut s = TokenizedSequence {
        ids: ids.to_vec(),
        attention_mask: vec![1; n],
        segment_ids: vec![0; n],
        original_length: n,
    };
    s.ids.resize(max_len, 0);
    s.attention_mask.resize(max_len, 0);
    s.segment_ids.resize(max_len, 0);
    s
}

fn pair(a: &[u32], b: &[u32], max_len: usize) -> TokenizedSequence {
    let ids: Vec<u32> = a.iter().chain(b).copied().collect();
    let mut s = seq(&ids, max_len);
    for i in a.len()..ids.len() {
        s.segment_ids[i] = 1;
    }
    s
}

#[test]
fn count_matches_formula_for_presets_of_each_family() {
    for v in Variant::ALL {
        let cfg = v.config(&small(50, 12)).unwrap();
        let m = build_model(cfg.clone(), 3).unwrap();
        let b = cfg.param_breakdown();
        assert_eq!(param_count(&m), b.total(), "{v}");
        assert_eq!(m.group_count(ParamGroup::WordEmbedding), b.word_embedding);
        assert_eq!(m.group_count(ParamGroup::Encoder), b.encoder);
        assert_eq!(m.group_count(ParamGroup::Pooler), b.pooler);
        assert_eq!(m.group_count(ParamGroup::TokenTypeEmbedding), b.token_type_embedding);
    }
}

#[test]
fn shared_encoder_count_is_independent_of_depth() {
    let mut cfg = small(40, 8);
    cfg.sharing = SharingMode::All;
    cfg.num_layers = 2;
    let a = build_model(cfg.clone(), 0).unwrap();
    cfg.num_layers = 12;
    let b = build_model(cfg, 0).unwrap();
    assert_eq!(a.group_count(ParamGroup::Encoder), b.group_count(ParamGroup::Encoder));
    assert_eq!(b.layer_param_name(0, "ffn.inner.weight"), b.layer_param_name(11, "ffn.inner.weight"));
}

#[test]
fn factorization_difference() {
    let mut cfg = small(1000, 8);
    cfg.hidden_size = 64;
    cfg.num_heads = 4;
    cfg.embedding_size = 64;
    let full = build_model(cfg.clone(), 0).unwrap();
    cfg.embedding_size = 16;
    let fact = build_model(cfg, 0).unwrap();
    assert_eq!(full.group_count(ParamGroup::WordEmbedding), 64_000);
    assert_eq!(fact.group_count(ParamGroup::WordEmbedding), 17_024);
    assert_eq!(param_count(&full) - param_count(&fact), 1000 * 64 - (1000 * 16 + 16 * 64));
}

#[test]
fn student_is_smaller() {
    let teacher = small(60, 10);
    let student = derive_student_config(&teacher).unwrap();
    let t = build_model(teacher, 1).unwrap();
    let s = build_model(student, 1).unwrap();
    assert!(param_count(&s) < param_count(&t));
}

#[test]
fn invalid_config_rejected() {
    let mut cfg = small(20, 8);
    cfg.num_heads = 3;
    assert!(build_model(cfg, 0).is_err());
}

#[test]
fn same_seed_same_weights() {
    let a = build_model(small(30, 8), 9).unwrap();
    let b = build_model(small(30, 8), 9).unwrap();
    let c = build_model(small(30, 8), 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn classify_range_duplicates_and_padding() {
    let m = build_model(small(30, 16), 4).unwrap();
    let x = seq(&[2, 7, 8, 9, 3], 8);
    let y = seq(&[2, 10, 11, 3], 8);
    let p = forward_classify(&m, &[x.clone(), y, x.clone()]).unwrap();
    assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(p[0], p[2]);
    let longer = forward_classify(&m, &[x.padded_to(16)]).unwrap();
    assert!((longer[0] - p[0]).abs() < 1e-10);
    assert!(forward_classify(&m, &[seq(&[2, 3], 17)]).is_err());
}

#[test]
fn padding_invariance_with_sinusoidal_positions() {
    let mut cfg = small(30, 16);
    cfg.positional = PositionalMode::Sinusoidal;
    let m = build_model(cfg, 4).unwrap();
    let x = seq(&[2, 7, 8, 9, 3], 6);
    let a = forward_classify(&m, std::slice::from_ref(&x)).unwrap()[0];
    let b = forward_classify(&m, &[x.padded_to(16)]).unwrap()[0];
    assert!((a - b).abs() < 1e-10);
}

#[test]
fn mlm_logit_shape_and_position_checks() {
    let m = build_model(small(100, 10), 2).unwrap();
    let s = seq(&[2, 20, 21, 22, 23, 3], 10);
    let out = forward_mlm(&m, std::slice::from_ref(&s), &[vec![1, 2, 4]]).unwrap();
    assert_eq!(out[0].shape(), &[3, 100]);
    for r in 0..3 {
        let row = out[0].row(r);
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let total: f64 = row.iter().map(|v| (v - mx).exp() / z).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
    assert!(forward_mlm(&m, std::slice::from_ref(&s), &[vec![6]]).is_err());
    assert!(forward_mlm(&m, &[s], &[]).is_err());
}

#[test]
fn mlm_gradient_matches_finite_difference() {
    let mut cfg = small(25, 6);
    cfg.num_layers = 1;
    let mut m = build_model(cfg, 5).unwrap();
    let s = seq(&[2, 6, 4, 9, 3], 6);
    let loss_of = |m: &Model| -> (f64, Option<Vec<f64>>) {
        let mut f = Forward::with_grad(m);
        let z = f.mlm_logits(&s, &[2]).unwrap();
        let lp = f.graph.log_softmax(z, 1).unwrap();
        let picked = f.graph.slice(lp, 1, 9, 10).unwrap();
        let loss = f.graph.scale(picked, -1.0).unwrap();
        let loss = f.graph.sum(loss).unwrap();
        let value = f.graph.value(loss).item().unwrap();
        let grads = f.backward(loss).unwrap();
        (value, grads.get("embeddings.word.weight").cloned())
    };
    let (_, grad) = loss_of(&m);
    let grad = grad.unwrap();
    let h = 1e-5;
    // Context token 6 at row 6, column 1 of the table; unused token 7 must get none.
    for &(row, col) in &[(6usize, 1usize), (9, 3), (4, 0)] {
        let idx = row * 8 + col;
        let w = m.params_mut().get_mut("embeddings.word.weight").unwrap();
        w.values_mut()[idx] += h;
        let (up, _) = loss_of(&m);
        let w = m.params_mut().get_mut("embeddings.word.weight").unwrap();
        w.values_mut()[idx] -= 2.0 * h;
        let (down, _) = loss_of(&m);
        let w = m.params_mut().get_mut("embeddings.word.weight").unwrap();
        w.values_mut()[idx] += h;
        let numeric = (up - down) / (2.0 * h);
        assert!((numeric - grad[idx]).abs() < 1e-6 * (1.0 + numeric.abs()), "{numeric} vs {}", grad[idx]);
    }
    assert!(grad[7 * 8..8 * 8].iter().all(|&v| v == 0.0));
}

#[test]
fn pair_head_requires_second_segment() {
    let m = build_model(small(30, 10), 6).unwrap();
    let single = seq(&[2, 5, 3], 10);
    assert!(forward_pair_classify(&m, &[single]).is_err());
    let ab = pair(&[2, 5, 6, 3], &[7, 8, 3], 10);
    let ba = pair(&[2, 7, 8, 3], &[5, 6, 3], 10);
    let p = forward_pair_classify(&m, &[ab.clone(), ba.clone()]).unwrap();
    let q = forward_pair_classify(&m, &[ba, ab]).unwrap();
    assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!((p[0], p[1]), (q[1], q[0]));
}

#[test]
fn shared_update_moves_every_layer() {
    let mut cfg = small(20, 6);
    cfg.sharing = SharingMode::All;
    cfg.num_layers = 3;
    let m = build_model(cfg, 2).unwrap();
    let s = seq(&[2, 5, 6, 3], 6);
    let mut f = Forward::with_grad(&m);
    let z = f.classify_logit(&s).unwrap();
    let grads = f.backward(z).unwrap();
    assert!(!grads.keys().any(|k| k.contains("layer")));
    assert!(grads.contains_key("encoder.shared.attention.query.weight"));
}

#[test]
fn checkpoint_round_trip_and_shape_check() {
    let m = build_model(Variant::Albert.config(&small(30, 8)).unwrap(), 8).unwrap();
    let bytes = m.to_checkpoint(None).to_bytes();
    let (back, vocab) = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert!(vocab.is_none());
    assert_eq!(back, m);

    let mut ck = m.to_checkpoint(None);
    ck.tensors.shift_remove("classifier.bias");
    assert!(Model::from_checkpoint(&ck).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn count_formula_holds(
        layers in 1usize..4,
        heads in 1usize..3,
        head_dim in 1usize..4,
        e_div in 1usize..3,
        vocab in 8usize..40,
        max_len in 3usize..10,
        sharing in 0usize..4,
        flags in 0u8..8,
    ) {
        let h = heads * head_dim * 2;
        let cfg = ModelConfig {
            num_layers: layers,
            hidden_size: h,
            num_heads: heads,
            ff_size: 2 * h,
            vocab_size: vocab,
            embedding_size: h / e_div,
            max_len,
            sharing: [SharingMode::None, SharingMode::FfnOnly, SharingMode::AttentionOnly, SharingMode::All][sharing],
            use_token_type_embeddings: flags & 1 == 1,
            use_pooler: flags & 2 == 2,
            positional: if flags & 4 == 4 { PositionalMode::Sinusoidal } else { PositionalMode::Learned },
            ..ModelConfig::tiny(vocab, max_len)
        };
        let m = build_model(cfg.clone(), 0).unwrap();
        prop_assert_eq!(param_count(&m), cfg.param_breakdown().total());
    }
}
