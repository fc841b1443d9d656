use super::*;
use crate::corpus::TokenBatch;
use crate::error::Error;
use crate::numerics::Tensor;
use crate::patch::{fuse_patch, insert_patch, PatchMatrix};
use crate::hadamard::build_hadamard;
use crate::pruning::{prune_layers, PruneSpec};

fn config(layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        hidden_dim: 8,
        n_heads: 2,
        mlp_dim: 16,
        vocab_size: 16,
        max_seq_len: 8,
        rms_eps: 1e-6,
    }
}

fn tokens(batch: usize, seed: usize) -> TokenBatch {
    let ids = (0..batch * 8)
        .map(|i| ((i * 7 + seed * 3 + i / 5) % 16) as u32)
        .collect();
    TokenBatch::new(ids, batch, 8).unwrap()
}

fn rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b).unwrap() / b.max_abs().max(1e-300)
}

#[test]
fn zero_layer_model_is_embedding_norm_head() {
    let m = TransformerModel::<f64>::init(config(0), 1).unwrap();
    let x = tokens(1, 0);
    let logits = m.forward(&x).unwrap();
    for t in 0..8 {
        let id = x.ids()[t] as usize;
        let e: Vec<f64> = (0..8)
            .map(|k| m.token_embedding.at2(id, k) + m.position_embedding.at2(t, k))
            .collect();
        let rms = (e.iter().map(|v| v * v).sum::<f64>() / 8.0 + 1e-6).sqrt();
        for v in 0..16 {
            let want: f64 = (0..8)
                .map(|k| e[k] / rms * m.final_norm.data()[k] * m.lm_head.at2(k, v))
                .sum();
            assert!((logits.data()[t * 16 + v] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn zeroed_layer_equals_removal() {
    let mut m = TransformerModel::<f32>::init(config(3), 2).unwrap();
    m.layers[1].zero_output_projections();
    let pruned = prune_layers(&m, &PruneSpec::block(1, 1, 3).unwrap()).unwrap();
    let x = tokens(2, 1);
    assert_eq!(m.forward(&x).unwrap(), pruned.forward(&x).unwrap());
}

#[test]
fn causality() {
    let m = TransformerModel::<f64>::init(config(2), 3).unwrap();
    let base = tokens(1, 2);
    let a = m.forward(&base).unwrap();
    for t in 0..8 {
        let mut ids = base.ids().to_vec();
        ids[t] = (ids[t] + 5) % 16;
        let b = m.forward(&TokenBatch::new(ids, 1, 8).unwrap()).unwrap();
        assert_eq!(&a.data()[..t * 16], &b.data()[..t * 16], "position {t} leaked backwards");
        assert_ne!(&a.data()[t * 16..(t + 1) * 16], &b.data()[t * 16..(t + 1) * 16]);
    }
}

#[test]
fn out_of_range_and_overlong_inputs() {
    let m = TransformerModel::<f32>::init(config(1), 4).unwrap();
    let bad = TokenBatch::new(vec![16; 8], 1, 8).unwrap();
    assert!(matches!(m.forward(&bad), Err(Error::Input(_))));
    let long = TokenBatch::new(vec![1; 9], 1, 9).unwrap();
    assert!(matches!(m.forward(&long), Err(Error::Input(_))));
}

#[test]
fn trace_reconstructs_residual_updates() {
    let m = TransformerModel::<f64>::init(config(3), 5).unwrap();
    let x = tokens(2, 3);
    let (logits, trace) = m.forward_traced(&x).unwrap();
    assert_eq!(trace.entries().len(), 4);

    let mut tape = crate::numerics::Tape::new();
    let bound = m.bind(&mut tape, Trainable::Nothing);
    let emb = m.embed_on_tape(&mut tape, &bound, &x).unwrap();
    assert_eq!(tape.value(emb), trace.entry(0).unwrap());

    for l in 0..3 {
        let f = m.layer_update(l, trace.entry(l).unwrap()).unwrap();
        let rebuilt = trace.entry(l).unwrap().add(&f).unwrap();
        assert!(rel_diff(&rebuilt, trace.entry(l + 1).unwrap()) < 1e-6);
        let replay = m.replay_from(l, trace.entry(l).unwrap()).unwrap();
        assert!(rel_diff(&replay, &logits) < 1e-6);
    }
}

#[test]
fn identity_patch_is_a_no_op() {
    let m = TransformerModel::<f64>::init(config(3), 6).unwrap();
    let x = tokens(2, 4);
    let base = m.forward(&x).unwrap();
    for slot in 0..=3 {
        let p = insert_patch(m.clone(), slot, PatchMatrix::identity(8)).unwrap();
        assert!(rel_diff(&p.forward(&x).unwrap(), &base) < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let m = TransformerModel::<f32>::init(config(2), 7).unwrap();
    let d: Vec<f64> = (0..8).map(|k| 0.5 + k as f64 * 0.25).collect();
    let p = fuse_patch(&build_hadamard(8).unwrap(), &d).unwrap();
    let mut m = insert_patch(m, 1, p).unwrap();
    m.patches_mut()[0].mark_trained();

    let bytes = m.to_checkpoint_bytes().unwrap();
    let back = TransformerModel::from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_checkpoint_bytes().unwrap(), bytes);
    let x = tokens(2, 5);
    assert_eq!(back.forward(&x).unwrap(), m.forward(&x).unwrap());
}

#[test]
fn checkpoint_rejects_damage() {
    let m = TransformerModel::<f32>::init(config(1), 8).unwrap();
    let bytes = m.to_checkpoint_bytes().unwrap();
    let field = |b: &[u8]| match TransformerModel::from_checkpoint_bytes(b) {
        Err(Error::Format { field, .. }) => field,
        other => panic!("expected a format error, got {other:?}"),
    };
    assert!(field(&bytes[..bytes.len() - 3]).starts_with("tensor"));
    assert_eq!(field(&bytes[..10]), "header");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(field(&bad), "magic");
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(field(&bad), "version");
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0; 4]);
    assert_eq!(field(&extra), "payload");
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lpm");
    let m = TransformerModel::<f32>::init(config(2), 9).unwrap();
    m.save_checkpoint(&path).unwrap();
    assert_eq!(TransformerModel::load_checkpoint(&path).unwrap(), m);
    assert!(matches!(
        TransformerModel::load_checkpoint(dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn trace_file_round_trip() {
    let m = TransformerModel::<f32>::init(config(2), 10).unwrap();
    let (_, t) = m.forward_traced(&tokens(3, 1)).unwrap();
    let back = HiddenTrace::from_bytes(&t.to_bytes().unwrap()).unwrap();
    assert_eq!(back, t);
    let bytes = t.to_bytes().unwrap();
    assert!(HiddenTrace::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn collected_trace_matches_single_pass() {
    let m = TransformerModel::<f32>::init(config(2), 11).unwrap();
    let x = tokens(5, 2);
    let windows: Vec<&[u32]> = (0..5).map(|i| x.row(i)).collect();
    let chunked = HiddenTrace::collect(&m, &windows, 2).unwrap();
    let (_, whole) = m.forward_traced(&x).unwrap();
    for (a, b) in chunked.entries().iter().zip(whole.entries()) {
        assert!(a.max_abs_diff(b).unwrap() < 1e-6);
    }
}

fn stream(pattern: &[u32], len: usize) -> Vec<u32> {
    pattern.iter().copied().cycle().take(len).collect()
}

fn quick_train(corpus: &[u32], seed: u64) -> (TransformerModel<f32>, TrainReport) {
    let mut m = TransformerModel::<f32>::init(config(1), seed).unwrap();
    let cfg = TrainConfig {
        steps: 150,
        batch_size: 4,
        seq_len: 8,
        lr: 1e-2,
        warmup: 10,
        log_every: 0,
        seed,
        ..TrainConfig::default()
    };
    let report = train_toy(&mut m, corpus, &cfg).unwrap();
    (m, report)
}

#[test]
fn degenerate_corpora_converge() {
    let (m, report) = quick_train(&stream(&[3], 2000), 1);
    assert!(report.final_perplexity(10).unwrap() < report.initial_perplexity().unwrap());
    let ppl = crate::eval::perplexity(&m, &stream(&[3], 256), 8).unwrap();
    assert!(ppl < 1.05, "constant corpus perplexity {ppl}");

    let (m, _) = quick_train(&stream(&[4, 9], 2000), 2);
    let ppl = crate::eval::perplexity(&m, &stream(&[4, 9], 256), 8).unwrap();
    assert!(ppl < 1.1, "alternating corpus perplexity {ppl}");
}

#[test]
fn training_is_deterministic() {
    let corpus: Vec<u32> = (0..2000).map(|i| ((i * i + 3 * i) % 13) as u32).collect();
    let (a, _) = quick_train(&corpus, 5);
    let (b, _) = quick_train(&corpus, 5);
    assert_eq!(a.to_checkpoint_bytes().unwrap(), b.to_checkpoint_bytes().unwrap());
    let (c, _) = quick_train(&corpus, 6);
    assert_ne!(a.backbone_digest(), c.backbone_digest());
}

#[test]
fn training_preconditions() {
    let mut m = TransformerModel::<f32>::init(config(1), 1).unwrap();
    let cfg = TrainConfig {
        seq_len: 8,
        ..TrainConfig::default()
    };
    assert!(matches!(train_toy(&mut m, &[1; 799], &cfg), Err(Error::Input(_))));
    let mut patched = insert_patch(m, 0, PatchMatrix::identity(8)).unwrap();
    assert!(matches!(train_toy(&mut patched, &[1; 800], &cfg), Err(Error::Contract(_))));
}

#[test]
fn zero_steps_leave_initialization() {
    let init = TransformerModel::<f32>::init(config(1), 3).unwrap();
    let mut m = init.clone();
    let cfg = TrainConfig {
        steps: 0,
        seq_len: 8,
        ..TrainConfig::default()
    };
    let report = train_toy(&mut m, &[2; 1000], &cfg).unwrap();
    assert!(report.losses.is_empty());
    assert_eq!(m, init);
}
