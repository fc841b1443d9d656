use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

/// Central finite differences of `f` at `x`.
fn numeric_grad(f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        out.push((f(&plus) - f(&minus)) / (2.0 * eps));
    }
    out
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Checks the gradient of `sum(op(x) * w)` for a fixed random weighting `w`.
fn check_unary(
    op: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
    x: Tensor<f64>,
    seed: u64,
) -> f64 {
    let out_shape = {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = op(&mut t, v).unwrap();
        t.value(y).shape().to_vec()
    };
    let w = Tensor::<f64>::randn(out_shape, 1.0, &mut rng(seed));
    let eval = |input: &Tensor<f64>, grad: bool| -> (f64, Option<Tensor<f64>>) {
        let mut t = Tape::new();
        let v = t.leaf(input.clone().with_grad(grad));
        let y = op(&mut t, v).unwrap();
        let wv = t.constant(w.clone());
        let yw = t.mul(y, wv).unwrap();
        let loss = t.sum(yw).unwrap();
        let val = t.value(loss).item().unwrap();
        let g = if grad {
            Some(t.backward(loss).unwrap().get(v).unwrap().clone())
        } else {
            None
        };
        (val, g)
    };
    let analytic = eval(&x, true).1.unwrap();
    let numeric = numeric_grad(&|p| eval(p, false).0, &x, 1e-5);
    max_rel_err(analytic.data(), &numeric)
}

#[test]
fn matmul_identity_cases() {
    let a = Tensor::<f32>::new([2, 2], vec![1., 2., 3., 4.]).unwrap();
    assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);
    let b = Tensor::<f32>::new([2, 1], vec![5., 7.]).unwrap();
    assert_eq!(Tensor::<f32>::eye(2).matmul(&b).unwrap(), b);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = Tensor::<f64>::randn([3, 4], 1.0, &mut r);
    let b = Tensor::<f64>::randn([4, 2], 1.0, &mut r);
    let expect = naive_matmul(a.data(), b.data(), 3, 4, 2);
    let got = a.matmul(&b).unwrap();
    for (g, e) in got.data().iter().zip(&expect) {
        assert!((g - e).abs() < 1e-6);
    }
    // batched leading dims flatten into rows
    let a3 = Tensor::<f64>::randn([2, 3, 4], 1.0, &mut r);
    let got = a3.matmul(&b).unwrap();
    assert_eq!(got.shape(), &[2, 3, 2]);
    let expect = naive_matmul(a3.data(), b.data(), 6, 4, 2);
    assert!(got.data().iter().zip(&expect).all(|(g, e)| (g - e).abs() < 1e-9));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::<f32>::zeros([2, 3]);
    let b = Tensor::<f32>::zeros([2, 3]);
    match a.matmul(&b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn identity_product_is_bitwise_stable() {
    let mut r = rng(2);
    let x = Tensor::<f32>::randn([5, 8], 1.0, &mut r);
    let w = Tensor::<f32>::randn([8, 3], 1.0, &mut r);
    let xi = x.matmul(&Tensor::eye(8)).unwrap();
    assert_eq!(xi.data(), x.data());
    assert_eq!(xi.matmul(&w).unwrap().data(), x.matmul(&w).unwrap().data());
}

#[test]
fn softmax_examples() {
    let s = Tensor::<f64>::new([2], vec![0.0, 0.0]).unwrap().softmax(0).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = Tensor::<f64>::new([2], vec![3.0, -1e9]).unwrap().softmax(0).unwrap();
    assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-12);

    // reference: e^k / (e + e^2 + e^3) evaluated independently
    let e1 = std::f64::consts::E;
    let denom = e1 + e1 * e1 + e1 * e1 * e1;
    let expect = [e1 / denom, e1 * e1 / denom, e1 * e1 * e1 / denom];
    let s32 = Tensor::<f32>::new([3], vec![1.0, 2.0, 3.0]).unwrap().softmax(0).unwrap();
    for (g, e) in s32.data().iter().zip(expect) {
        assert!((*g as f64 - e).abs() < 1e-7, "{g} vs {e}");
    }
}

#[test]
fn softmax_along_inner_axis() {
    let x = Tensor::<f64>::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let s = x.softmax(0).unwrap();
    for j in 0..3 {
        let col = s.at2(0, j) + s.at2(1, j);
        assert!((col - 1.0).abs() < 1e-12);
        assert!((s.at2(1, j) - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-12);
    }
    assert!(x.softmax(2).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::randn([2, 3, 4], 1.0, &mut rng(3)).with_grad(true));
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_half_square_is_identity() {
    let xv = Tensor::<f64>::randn([7], 1.0, &mut rng(4));
    let mut t = Tape::new();
    let x = t.leaf(xv.clone().with_grad(true));
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    let half = t.scale(s, 0.5).unwrap();
    let g = t.backward(half).unwrap();
    for (a, b) in g.get(x).unwrap().data().iter().zip(xv.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::ones([3]).with_grad(true));
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut r = rng(5);
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::randn([4, 3], 1.0, &mut r));
    let w = t.leaf(Tensor::randn([3, 2], 1.0, &mut r).with_grad(true));
    let frozen = t.leaf(Tensor::randn([2, 2], 1.0, &mut r));
    let y = t.matmul(x, w).unwrap();
    let z = t.matmul(y, frozen).unwrap();
    let s = t.sum(z).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(w).is_some());
    assert!(g.get(frozen).is_none());
    assert!(g.get(x).is_none());
}

#[test]
fn nan_aborts_with_op_name() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::new([2], vec![f32::MAX, 1.0]).unwrap());
    let err = t.add(x, x).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "add" }));
}

#[test]
fn reused_values_accumulate() {
    // loss = sum(x) + sum(x) -> gradient 2
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::ones([3]).with_grad(true));
    let a = t.sum(x).unwrap();
    let b = t.sum(x).unwrap();
    let c = t.add(a, b).unwrap();
    let g = t.backward(c).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 2.0));
}

#[test]
fn gradient_matmul_both_sides() {
    let mut r = rng(6);
    let w = Tensor::<f64>::randn([4, 3], 1.0, &mut r);
    let x = Tensor::<f64>::randn([2, 5, 4], 1.0, &mut r);
    let err = check_unary(
        |t, v| {
            let wv = t.constant(w.clone());
            t.matmul(v, wv)
        },
        x.clone(),
        60,
    );
    assert!(err < 1e-4, "lhs {err}");
    let err = check_unary(
        |t, v| {
            let xv = t.constant(x.clone());
            t.matmul(xv, v)
        },
        w,
        61,
    );
    assert!(err < 1e-4, "rhs {err}");
}

#[test]
fn gradient_elementwise_and_broadcast() {
    let mut r = rng(7);
    let other = Tensor::<f64>::randn([3, 4], 1.0, &mut r);
    let x = Tensor::<f64>::randn([3, 4], 1.0, &mut r);
    let e = check_unary(
        |t, v| {
            let o = t.constant(other.clone());
            t.mul(v, o)
        },
        x.clone(),
        70,
    );
    assert!(e < 1e-4);
    let e = check_unary(
        |t, v| {
            let o = t.constant(other.clone());
            t.add(v, o)
        },
        x.clone(),
        71,
    );
    assert!(e < 1e-4);
    let big = Tensor::<f64>::randn([2, 3, 4], 1.0, &mut r);
    let e = check_unary(
        |t, v| {
            let b = t.constant(big.clone());
            t.add_broadcast(b, v)
        },
        x.clone(),
        72,
    );
    assert!(e < 1e-4);
    let e = check_unary(|t, v| t.scale(v, -1.7), x, 73);
    assert!(e < 1e-4);
}

#[test]
fn gradient_gelu_softmax() {
    let x = Tensor::<f64>::randn([3, 5], 2.0, &mut rng(8));
    assert!(check_unary(|t, v| t.gelu(v), x.clone(), 80) < 1e-4);
    assert!(check_unary(|t, v| t.softmax(v), x, 81) < 1e-4);
}

#[test]
fn gradient_rms_norm_input_and_gain() {
    let mut r = rng(9);
    let x = Tensor::<f64>::randn([2, 3, 6], 1.0, &mut r);
    let gain = Tensor::<f64>::randn([6], 1.0, &mut r);
    let e = check_unary(
        |t, v| {
            let g = t.constant(gain.clone());
            t.rms_norm(v, g, 1e-6)
        },
        x.clone(),
        90,
    );
    assert!(e < 1e-4, "input {e}");
    let e = check_unary(
        |t, v| {
            let xv = t.constant(x.clone());
            t.rms_norm(xv, v, 1e-6)
        },
        gain,
        91,
    );
    assert!(e < 1e-4, "gain {e}");
}

#[test]
fn gradient_embedding() {
    let table = Tensor::<f64>::randn([5, 3], 1.0, &mut rng(10));
    let ids = [4usize, 0, 4, 2];
    let e = check_unary(|t, v| t.embedding(v, &ids, &[2, 2]), table, 100);
    assert!(e < 1e-4);
}

#[test]
fn gradient_causal_attention() {
    let qkv = Tensor::<f64>::randn([2, 5, 12], 1.0, &mut rng(11));
    let e = check_unary(|t, v| t.causal_attention(v, 2), qkv, 110);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn attention_matches_explicit_composition() {
    // single head, [1, 3, 3C] with C=2: compare against hand-rolled softmax(QKᵀ/√d)V
    let mut r = rng(12);
    let qkv = Tensor::<f64>::randn([1, 3, 6], 1.0, &mut r);
    let mut t = Tape::new();
    let v = t.constant(qkv.clone());
    let out = t.causal_attention(v, 1).unwrap();
    let d = qkv.data();
    let row = |i: usize, off: usize| [d[i * 6 + off], d[i * 6 + off + 1]];
    for i in 0..3 {
        let q = row(i, 0);
        let scores: Vec<f64> = (0..=i)
            .map(|j| {
                let k = row(j, 2);
                (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt()
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        let mut o = [0.0; 2];
        for (j, s) in scores.iter().enumerate() {
            let p = (s - m).exp() / z;
            let vv = row(j, 4);
            o[0] += p * vv[0];
            o[1] += p * vv[1];
        }
        let got = &t.value(out).data()[i * 2..i * 2 + 2];
        assert!((got[0] - o[0]).abs() < 1e-12 && (got[1] - o[1]).abs() < 1e-12);
    }
}

#[test]
fn gradient_cross_entropy_and_kl_and_mse() {
    let mut r = rng(13);
    let logits = Tensor::<f64>::randn([4, 6], 1.0, &mut r);
    let targets = [0usize, 5, 2, 2];
    let e = check_unary(|t, v| t.cross_entropy(v, &targets), logits.clone(), 130);
    assert!(e < 1e-4);

    let indices = [1usize, 4, 0, 2, 3, 5, 5, 0, 1, 3, 2, 4];
    let teacher: Vec<f64> = (0..12).map(|i| 0.05 + 0.03 * (i % 5) as f64).collect();
    let e = check_unary(|t, v| t.kl_topk(v, &indices, &teacher, 3), logits.clone(), 131);
    assert!(e < 1e-4);

    let target = Tensor::<f64>::randn([4, 6], 1.0, &mut r);
    let e = check_unary(
        |t, v| {
            let tv = t.constant(target.clone());
            t.mse(v, tv)
        },
        logits,
        132,
    );
    assert!(e < 1e-4);
}

#[test]
fn cross_entropy_value_matches_log_softmax() {
    let logits = Tensor::<f64>::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let mut t = Tape::new();
    let l = t.constant(logits);
    let ce = t.cross_entropy(l, &[2]).unwrap();
    let e = std::f64::consts::E;
    let expect = -(e.powi(3) / (e + e * e + e.powi(3))).ln();
    assert!((t.value(ce).item().unwrap() - expect).abs() < 1e-12);
}

proptest! {
    #[test]
    fn softmax_is_permutation_equivariant(
        xs in prop::collection::vec(-20.0f64..20.0, 2..12),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let n = xs.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng(seed));
        let x = Tensor::<f64>::new([n], xs.clone()).unwrap();
        let px = Tensor::<f64>::new([n], perm.iter().map(|&i| xs[i]).collect()).unwrap();
        let s = x.softmax(0).unwrap();
        let ps = px.softmax(0).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((ps.data()[j] - s.data()[i]).abs() < 1e-15);
        }
        prop_assert!((s.sum() - 1.0).abs() < 1e-6);
        prop_assert!(s.data().iter().all(|&p| p > 0.0 && p <= 1.0));
    }

    #[test]
    fn matmul_agrees_with_oracle(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::<f64>::randn([m, k], 1.0, &mut r);
        let b = Tensor::<f64>::randn([k, n], 1.0, &mut r);
        let expect = naive_matmul(a.data(), b.data(), m, k, n);
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(&expect) {
            prop_assert!((g - e).abs() < 1e-9);
        }
    }
}
