use super::*;
use crate::hadamard::build_hadamard;
use crate::model::ModelConfig;
use crate::patch::{fuse_patch, insert_patch, PatchMatrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        hidden_dim: 8,
        n_heads: 2,
        mlp_dim: 16,
        vocab_size: vocab,
        max_seq_len: 8,
        rms_eps: 1e-6,
    }
}

fn stream(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Teacher is the dense model; the student has layer 1 removed and a fused
/// patch in its place.
fn setup<T: Element>(vocab: usize) -> (TransformerModel<T>, TransformerModel<T>) {
    let teacher = TransformerModel::<T>::init(config(vocab), 3).unwrap();
    let mut student = teacher.clone();
    student.layers.truncate(1);
    student.config.n_layers = 1;
    let d: Vec<f64> = (0..8).map(|k| 0.8 + 0.05 * k as f64).collect();
    let p = fuse_patch(&build_hadamard(8).unwrap(), &d).unwrap();
    (teacher, insert_patch(student, 1, p).unwrap())
}

#[test]
fn kl_hand_example_and_identity() {
    let loss = kl_topk_loss(&[0.75, 0.25], &[0.3, 0.3]).unwrap();
    let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
    assert!((loss - want).abs() < 1e-12);
    assert!((want - 0.13081).abs() < 1e-5);
    let same = kl_topk_loss(&[0.2, 0.5, 0.3], &[0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]).unwrap();
    assert!(same.abs() < 1e-12);
    assert!(matches!(kl_topk_loss(&[0.0, 0.0], &[1.0, 2.0]), Err(Error::Contract(_))));
}

#[test]
fn tape_kl_matches_standalone() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = Tensor::<f64>::randn([3, 6], 1.5, &mut rng);
    let indices = vec![0, 2, 5, 1, 3, 4, 5, 4, 3];
    let teacher = vec![0.5, 0.2, 0.1, 0.3, 0.3, 0.1, 0.6, 0.2, 0.1];
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone());
    let l = tape.kl_topk(z, &indices, &teacher, 3).unwrap();
    let mut want = 0.0;
    for r in 0..3 {
        let zs: Vec<f64> = indices[r * 3..r * 3 + 3].iter().map(|&i| logits.at2(r, i)).collect();
        want += kl_topk_loss(&teacher[r * 3..r * 3 + 3], &zs).unwrap();
    }
    assert!((tape.value(l).item().unwrap() - want / 3.0).abs() < 1e-12);
}

#[test]
fn mse_examples() {
    let a = Tensor::<f64>::randn([2, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(mse_feature_loss(&a, &a).unwrap(), 0.0);
    let shifted = a.map(|v| v + 1.0);
    assert!((mse_feature_loss(&a, &shifted).unwrap() - 1.0).abs() < 1e-12);
    let b = Tensor::<f64>::zeros([3, 2]);
    assert!(matches!(mse_feature_loss(&a, &b), Err(Error::Input(_))));
}

#[test]
fn top_k_selection() {
    let logits = [0.1, 2.0, -1.0, 2.0, 0.5];
    let (idx, p) = top_k_probs(&logits, 3);
    assert_eq!(idx, vec![1, 3, 4]);
    assert_eq!(p[0], p[1]);
    let (idx, _) = top_k_probs(&logits, 1);
    assert_eq!(idx, vec![1]);
    let (_, full) = top_k_probs(&logits, 5);
    let mass: f64 = full.iter().map(|&v| f64::from(v)).sum();
    assert!((mass - 1.0).abs() < 1e-6);
}

#[test]
fn cache_invariants_and_round_trip() {
    let (teacher, _) = setup::<f32>(32);
    let toks = stream(8 * 6, 32, 1);
    let full = cache_teacher_logits(&teacher, &toks, 8, 32, None).unwrap();
    assert_eq!(full.sequences(), 6);
    for pos in 0..full.positions() {
        let mass: f64 = full.entry(pos).1.iter().map(|&v| f64::from(v)).sum();
        assert!((mass - 1.0).abs() < 1e-6);
    }
    let top1 = cache_teacher_logits(&teacher, &toks, 8, 1, Some(2)).unwrap();
    let logits = teacher.forward(&TokenBatch::new(toks[..16].to_vec(), 2, 8).unwrap()).unwrap();
    for pos in 0..16 {
        let row = &logits.data()[pos * 32..(pos + 1) * 32];
        let argmax = (0..32).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
        assert_eq!(top1.entry(pos).0, &[argmax as u32]);
    }

    let mut bytes = Vec::new();
    full.write_to(&mut bytes).unwrap();
    assert_eq!(bytes.len(), full.file_len());
    assert_eq!(LogitsCache::read_from(bytes.as_slice()).unwrap(), full);
    assert!(matches!(
        LogitsCache::read_from(&bytes[..bytes.len() - 1]),
        Err(Error::Format { .. })
    ));
    let mut bad = bytes.clone();
    bad[0] = b'Q';
    assert!(matches!(LogitsCache::read_from(bad.as_slice()), Err(Error::Format { field, .. }) if field == "magic"));

    assert!(matches!(cache_teacher_logits(&teacher, &toks, 8, 33, None), Err(Error::Input(_))));
}

#[test]
fn malformed_entries_are_rejected() {
    let ok = LogitsCache::from_parts(2, 4, 1, 1, vec![2, 0], vec![0.6, 0.3]);
    assert!(ok.is_ok());
    for (idx, p) in [
        (vec![2, 2], vec![0.6, 0.3]),
        (vec![4, 0], vec![0.6, 0.3]),
        (vec![2, 0], vec![0.3, 0.6]),
        (vec![2, 0], vec![0.8, 0.3]),
        (vec![2, 0], vec![0.6, 0.0]),
    ] {
        assert!(LogitsCache::from_parts(2, 4, 1, 1, idx, p).is_err());
    }
}

fn kl_data(vocab: usize, windows: usize) -> (TransformerModel<f64>, TransformerModel<f64>, Vec<u32>, LogitsCache) {
    let (teacher, student) = setup::<f64>(vocab);
    let toks = stream(8 * windows, vocab, 2);
    let cache = cache_teacher_logits(&teacher, &toks, 8, vocab.min(8), None).unwrap();
    (teacher, student, toks, cache)
}

#[test]
fn patch_gradient_matches_finite_differences() {
    let (_, student, toks, cache) = kl_data(32, 2);
    let batch = TokenBatch::new(toks[..16].to_vec(), 2, 8).unwrap();
    let targets = TopKTargets::<f64>::from_cache(&cache, &[0, 1], 8);
    let (_, grads) = kl_batch(&student, &batch, &targets).unwrap();
    let g = &grads[0];
    let eps = 1e-4;
    for idx in 0..64 {
        let mut plus = student.clone();
        plus.patches_mut()[0].matrix_mut().data_mut()[idx] += eps;
        let mut minus = student.clone();
        minus.patches_mut()[0].matrix_mut().data_mut()[idx] -= eps;
        let fd = (kl_batch(&plus, &batch, &targets).unwrap().0 - kl_batch(&minus, &batch, &targets).unwrap().0)
            / (2.0 * eps);
        let a = g.data()[idx];
        assert!((a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()).max(1e-6), "entry {idx}: {a} vs {fd}");
    }
}

#[test]
fn zero_lr_freezes_everything() {
    let (_, mut student, toks, cache) = kl_data(16, 4);
    let backbone = student.backbone_digest();
    let patch = student.patch_digest();
    let cfg = DistillConfig {
        lr: 0.0,
        samples: 4,
        batch_size: 2,
        log_every: 0,
        ..DistillConfig::default()
    };
    let report = distill_patch(&mut student, DistillData::TopK { tokens: &toks, cache: &cache }, &cfg).unwrap();
    assert_eq!(report.step_losses.len(), 2);
    assert_eq!(student.backbone_digest(), backbone);
    assert_eq!(student.patch_digest(), patch);
}

#[test]
fn training_moves_only_the_patch() {
    let (_, mut student, toks, cache) = kl_data(16, 4);
    let backbone = student.backbone_digest();
    let patch = student.patch_digest();
    let cfg = DistillConfig {
        lr: 1e-2,
        samples: 4,
        batch_size: 2,
        epochs: 3,
        log_every: 0,
        ..DistillConfig::default()
    };
    let report = distill_patch(&mut student, DistillData::TopK { tokens: &toks, cache: &cache }, &cfg).unwrap();
    assert_eq!(report.epoch_losses.len(), 3);
    assert!(report.epoch_losses[2] < report.epoch_losses[0]);
    assert_eq!(student.backbone_digest(), backbone);
    assert_ne!(student.patch_digest(), patch);
    assert!(student.patches[&1][0].trained());
}

#[test]
fn small_step_decreases_batch_loss() {
    let (_, student, toks, cache) = kl_data(16, 2);
    let batch = TokenBatch::new(toks[..16].to_vec(), 2, 8).unwrap();
    let targets = TopKTargets::<f64>::from_cache(&cache, &[0, 1], 8);
    let (before, grads) = kl_batch(&student, &batch, &targets).unwrap();
    let mut stepped = student.clone();
    let mut patches = stepped.patches_mut();
    let p = patches[0].matrix_mut();
    *p = p.sub(&grads[0].scale(1e-3)).unwrap();
    let (after, _) = kl_batch(&stepped, &batch, &targets).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn diagonal_mask_keeps_off_diagonal() {
    let (_, mut student, toks, cache) = kl_data(16, 4);
    let before = student.patches[&1][0].matrix().clone();
    let cfg = DistillConfig {
        lr: 1e-2,
        samples: 4,
        batch_size: 2,
        diag_only: true,
        log_every: 0,
        ..DistillConfig::default()
    };
    distill_patch(&mut student, DistillData::TopK { tokens: &toks, cache: &cache }, &cfg).unwrap();
    let after = student.patches[&1][0].matrix();
    let mut diag_moved = false;
    for i in 0..8 {
        for j in 0..8 {
            if i == j {
                diag_moved |= after.at2(i, j) != before.at2(i, j);
            } else {
                assert_eq!(after.at2(i, j), before.at2(i, j));
            }
        }
    }
    assert!(diag_moved);
}

#[test]
fn preconditions() {
    let (teacher, _, toks, cache) = kl_data(16, 4);
    let mut bare = teacher.clone();
    let data = DistillData::TopK { tokens: &toks, cache: &cache };
    assert!(matches!(distill_patch(&mut bare, data, &DistillConfig::default()), Err(Error::Contract(_))));

    let mut patched = insert_patch(teacher, 0, PatchMatrix::identity(8)).unwrap();
    let short = &toks[..8];
    let cfg = DistillConfig {
        samples: 4,
        ..DistillConfig::default()
    };
    let err = distill_patch(&mut patched, DistillData::TopK { tokens: short, cache: &cache }, &cfg);
    assert!(matches!(err, Err(Error::Input(_))));
    let mse_cfg = DistillConfig {
        loss: DistillLoss::Mse,
        ..cfg
    };
    let err = distill_patch(&mut patched, DistillData::TopK { tokens: &toks, cache: &cache }, &mse_cfg);
    assert!(matches!(err, Err(Error::Input(_))));
}

#[test]
fn feature_alignment_reduces_mse() {
    let (teacher, mut student) = setup::<f64>(16);
    let toks = stream(8 * 4, 16, 3);
    let (_, trace) = teacher.forward_traced(&TokenBatch::new(toks, 4, 8).unwrap()).unwrap();
    let cfg = DistillConfig {
        loss: DistillLoss::Mse,
        lr: 1e-2,
        samples: 4,
        batch_size: 4,
        epochs: 20,
        log_every: 0,
        ..DistillConfig::default()
    };
    let backbone = student.backbone_digest();
    let report = distill_patch(
        &mut student,
        DistillData::Features { trace: &trace, start: 1, n: 1 },
        &cfg,
    )
    .unwrap();
    assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
    assert_eq!(student.backbone_digest(), backbone);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kl_is_non_negative_and_equals_ce_minus_entropy(
        raw in proptest::collection::vec(0.001f64..1.0, 2..12),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = raw.iter().map(|_| rng.random_range(-4.0..4.0)).collect();
        let kl = kl_topk_loss(&raw, &z).unwrap();
        prop_assert!(kl >= -1e-12);

        let mass: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / mass).collect();
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        let ce: f64 = p.iter().zip(&z).map(|(p, z)| -p * (z - lse)).sum();
        let h: f64 = p.iter().map(|p| -p * p.ln()).sum();
        prop_assert!((kl - (ce - h)).abs() < 1e-6);
        let renorm: f64 = p.iter().sum();
        prop_assert!((renorm - 1.0).abs() < 1e-6);
    }
}
