mod common;

use common::rel_err;
use proptest::prelude::*;
use tinykd_core::autodiff::Tape;
use tinykd_core::model::{
    count_instantiated, count_parameters, estimate_flops, preset, Checkpoint, EncoderModel, ModelConfig,
    ModelError, ParamCount, DESK_PRESETS, PUBLISHED,
};

fn tiny() -> ModelConfig {
    ModelConfig::new(2, 8, 12, 2).with_vocab(20, 10)
}

#[test]
fn published_counts_within_one_percent() {
    for row in PUBLISHED {
        let c = count_parameters(&row.config);
        let total = c.total as f64 / 1e6;
        let non_emb = c.non_embedding as f64 / 1e6;
        assert!((total - row.total_m).abs() / row.total_m < 0.01, "{} total {total}", row.display);
        assert!(
            (non_emb - row.non_embedding_m).abs() / row.non_embedding_m < 0.01,
            "{} non-embedding {non_emb}",
            row.display
        );
    }
}

#[test]
fn formula_matches_instantiated_tensors() {
    let mut configs = vec![tiny(), ModelConfig::new(1, 2, 2, 1).with_vocab(4, 2)];
    configs.extend(DESK_PRESETS.iter().map(|(_, c)| *c));
    for c in configs {
        let m = EncoderModel::init(c, 1).unwrap();
        assert_eq!(count_instantiated(&m), count_parameters(&c), "{c:?}");
    }
    assert_eq!(
        count_parameters(&ModelConfig::new(1, 2, 2, 1).with_vocab(4, 2)),
        ParamCount { total: 70, non_embedding: 50, embedding: 20 }
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn formula_matches_walk_for_random_configs(
        layers in 1usize..4, heads in 1usize..4, head_dim in 1usize..5,
        ffn in 1usize..20, vocab in 1usize..30, pos in 1usize..12, types in 1usize..3,
    ) {
        let mut c = ModelConfig::new(layers, heads * head_dim, ffn, heads).with_vocab(vocab, pos);
        c.type_vocab = types;
        let m = EncoderModel::init(c, 3).unwrap();
        prop_assert_eq!(count_instantiated(&m), count_parameters(&c));
    }
}

#[test]
fn every_published_config_instantiates_and_runs() {
    for row in PUBLISHED {
        let m = EncoderModel::init(row.config, 7).unwrap();
        assert_eq!(count_instantiated(&m), count_parameters(&row.config), "{}", row.display);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let ids = [2, 100, 2000, 3, 0, 0];
        let enc = m.encode(&mut tape, &bound, &ids, &[4], 6).unwrap();
        assert_eq!(enc.hidden_states.len(), row.config.layers + 1);
        for &h in &enc.hidden_states {
            assert!(tape.value(h).is_finite(), "{}", row.display);
        }
    }
}

#[test]
fn init_validation_and_determinism() {
    let bad = ModelConfig::new(2, 10, 8, 3);
    assert!(matches!(EncoderModel::init(bad, 0), Err(ModelError::Config(_))));
    let a = EncoderModel::init(tiny(), 42).unwrap();
    let b = EncoderModel::init(tiny(), 42).unwrap();
    let c = EncoderModel::init(tiny(), 43).unwrap();
    assert_eq!(a.params().fingerprint(), b.params().fingerprint());
    assert_ne!(a.params().fingerprint(), c.params().fingerprint());
    assert_eq!(preset("minirbt-h256").unwrap(), ModelConfig::new(6, 256, 1024, 8));
    assert_eq!(preset("rbt4-h312").unwrap(), ModelConfig::new(4, 312, 1200, 12));
}

#[test]
fn forward_shape_contract() {
    let cfg = preset("minirbt-h256").unwrap();
    let m = EncoderModel::init(cfg, 0).unwrap();
    let ids: Vec<usize> = (0..16).map(|i| 5 + i * 37).collect();
    let out = m.forward(&ids, &[8, 5], 8).unwrap();
    assert_eq!(out.hidden_states.len(), 7);
    for h in &out.hidden_states {
        assert_eq!(h.shape(), &[2, 8, 256]);
        assert!(h.is_finite());
    }
    assert_eq!(out.logits.shape(), &[2, 8, cfg.vocab_size]);
}

#[test]
fn forward_input_errors() {
    let m = EncoderModel::init(tiny(), 0).unwrap();
    assert!(matches!(m.forward(&[1, 2, 25], &[3], 3), Err(ModelError::Input(_))));
    assert!(matches!(m.forward(&[1; 11], &[11], 11), Err(ModelError::Input(_))));
    assert!(matches!(m.forward(&[1; 4], &[5], 4), Err(ModelError::Input(_))));
    assert!(matches!(m.forward(&[1; 4], &[0], 4), Err(ModelError::Input(_))));
    assert!(matches!(m.forward(&[1; 5], &[2], 4), Err(ModelError::Input(_))));
}

#[test]
fn pad_tokens_do_not_leak_into_real_positions() {
    let m = EncoderModel::init(tiny(), 5).unwrap();
    let a = [2, 7, 8, 9, 3, 0, 0, 0];
    let mut b = a;
    b[5] = 14;
    b[7] = 11;
    let (oa, ob) = (m.forward(&a, &[5], 8).unwrap(), m.forward(&b, &[5], 8).unwrap());
    for (ha, hb) in oa.hidden_states.iter().zip(&ob.hidden_states) {
        assert_eq!(&ha.data()[..5 * 8], &hb.data()[..5 * 8]);
    }
    assert_eq!(&oa.logits.data()[..5 * 20], &ob.logits.data()[..5 * 20]);
}

#[test]
fn attention_rows_over_real_keys_sum_to_one() {
    let m = EncoderModel::init(tiny(), 5).unwrap();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, false);
    let ids = [2, 7, 8, 3, 0, 0, 2, 9, 9, 9, 9, 3];
    let lens = [4, 6];
    let enc = m.encode(&mut tape, &bound, &ids, &lens, 6).unwrap();
    for &a in &enc.attention {
        let p = tape.value(a).data();
        for (r, row) in p.chunks(6).enumerate() {
            let len = lens[r / (2 * 6)];
            let s: f64 = row[..len].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(row[len..].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn batch_permutation_equivariance() {
    let m = EncoderModel::init(tiny(), 9).unwrap();
    let rows = [[2, 5, 6, 7, 3, 0], [2, 9, 3, 0, 0, 0], [2, 11, 12, 13, 14, 3]];
    let lens = [5, 3, 6];
    let flat = |order: &[usize]| -> (Vec<usize>, Vec<usize>) {
        (order.iter().flat_map(|&i| rows[i]).collect(), order.iter().map(|&i| lens[i]).collect())
    };
    let (ids, l) = flat(&[0, 1, 2]);
    let base = m.forward(&ids, &l, 6).unwrap();
    let (ids, l) = flat(&[2, 0, 1]);
    let perm = m.forward(&ids, &l, 6).unwrap();
    let per_row = 6 * 20;
    let last = |o: &tinykd_core::model::ForwardOutput, r: usize| o.logits.data()[r * per_row..(r + 1) * per_row].to_vec();
    assert_eq!(last(&base, 0), last(&perm, 1));
    assert_eq!(last(&base, 1), last(&perm, 2));
    assert_eq!(last(&base, 2), last(&perm, 0));
}

/// Mean of the full logits tensor as a function of the parameter values.
fn mean_logit(model: &EncoderModel, ids: &[usize], lens: &[usize], seq: usize) -> f64 {
    let out = model.forward(ids, lens, seq).unwrap();
    out.logits.data().iter().sum::<f64>() / out.logits.numel() as f64
}

#[test]
fn mean_logit_gradient_matches_finite_differences() {
    let model = EncoderModel::init(tiny(), 11).unwrap();
    let ids = [2, 5, 6, 7, 3, 0, 2, 8, 9, 3, 0, 0];
    let lens = [5, 4];
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let enc = model.encode(&mut tape, &bound, &ids, &lens, 6).unwrap();
    let logits = model.mlm_logits(&mut tape, &bound, enc.last(), None).unwrap();
    let loss = tape.mean(logits).unwrap();
    tape.backward(loss).unwrap();
    // the pooler is off this path and receives no gradient
    let grads: Vec<Vec<f64>> = bound
        .vars
        .iter()
        .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec))
        .collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    // every parameter entry of the tiny model
    for (pi, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let mut plus = model.clone();
            plus.params_mut().iter_mut().nth(pi).unwrap().tensor.data_mut()[j] += h;
            let mut minus = model.clone();
            minus.params_mut().iter_mut().nth(pi).unwrap().tensor.data_mut()[j] -= h;
            let fd = (mean_logit(&plus, &ids, &lens, 6) - mean_logit(&minus, &ids, &lens, 6)) / (2.0 * h);
            worst = worst.max(rel_err(g[j], fd));
            checked += 1;
        }
    }
    assert!(checked > 1000);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn flops_examples() {
    let teacher = preset("roberta-wwm").unwrap();
    let h256 = preset("minirbt-h256").unwrap();
    let ratio = estimate_flops(&teacher, 512) as f64 / estimate_flops(&h256, 512) as f64;
    assert!(ratio >= 6.8, "{ratio}");
    assert_eq!(estimate_flops(&ModelConfig::new(1, 1, 1, 1), 1), 16);
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let m = EncoderModel::init(tiny(), 21).unwrap();
    let ck = m.to_checkpoint();
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.config().unwrap(), tiny());
    let m2 = EncoderModel::from_checkpoint(&back).unwrap();
    assert_eq!(m2.params().fingerprint(), m.params().fingerprint());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(EncoderModel::load(&path).unwrap(), m2);
}

#[test]
fn checkpoint_rejects_corruption() {
    let bytes = EncoderModel::init(tiny(), 21).unwrap().to_checkpoint().to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    let mut wrong_cfg = Checkpoint::from_bytes(&bytes).unwrap();
    wrong_cfg.set_meta("hidden", 10);
    assert!(EncoderModel::from_checkpoint(&wrong_cfg).is_err());
}
