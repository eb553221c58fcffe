use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::rng::{stream, Stream};

const STEP: f64 = 1e-5;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Runs `build` on fresh tapes and compares backward gradients against
/// central differences of the forward value. Returns the worst relative
/// error over all inputs, guarding the denominator at 1e-6.
fn max_grad_error(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut worst = 0.0f64;
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, -1.0, 1.0, &mut stream(seed, Stream::Init))
}

/// Random values in [-1, 1] kept at least 1e-3 away from zero.
fn random_off_kink(shape: &[usize], seed: u64) -> Tensor {
    let mut x = random(shape, seed);
    for v in x.data_mut() {
        if v.abs() < 1e-3 {
            *v = 0.5;
        }
    }
    x
}

#[test]
fn matmul_identity_and_small_products() {
    let mut tape = Tape::new();
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let inputs = [random(&[3, 4], 1), random(&[4, 5], 2)];
    let err = max_grad_error(&inputs, |tape, v| {
        let p = tape.matmul(v[0], v[1]).unwrap();
        tape.sum(p)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn relu_forward_and_dead_gradient() {
    let mut tape = Tape::new();
    let x = tape.variable(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.variable(t(&[4], &[-1.0, -2.0, -0.5, -3.0]));
    let y = tape.relu(x);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_gradient_matches_finite_differences() {
    let inputs = [random_off_kink(&[4, 6], 3), random(&[4, 6], 4)];
    let err = max_grad_error(&inputs, |tape, v| {
        let r = tape.relu(v[0]);
        let p = tape.mul(r, v[1]).unwrap();
        tape.sum(p)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn max_pool_examples() {
    let mut tape = Tape::new();
    let single = tape.constant(t(&[1, 1, 3], &[0.5, -1.0, 2.0]));
    let out = tape.max_pool_points(single).unwrap();
    assert_eq!(tape.value(out).data(), &[0.5, -1.0, 2.0]);

    let x = tape.constant(t(&[1, 2, 2], &[1.0, 5.0, 3.0, 2.0]));
    let out = tape.max_pool_points(x).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0, 5.0]);
}

#[test]
fn max_pool_ties_route_gradient_to_first_point() {
    let mut tape = Tape::new();
    let x = tape.variable(t(&[1, 3, 1], &[2.0, 2.0, 1.0]));
    let out = tape.max_pool_points(x).unwrap();
    let s = tape.sum(out);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn max_pool_gradient_matches_finite_differences() {
    let inputs = [random(&[2, 5, 3], 5), random(&[2, 3], 6)];
    let err = max_grad_error(&inputs, |tape, v| {
        let p = tape.max_pool_points(v[0]).unwrap();
        let w = tape.mul(p, v[1]).unwrap();
        tape.sum(w)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn linear_max_pool_matches_unfused_composition() {
    let (b, n, k, f) = (3, 7, 5, 6);
    let x = random(&[b, n, k], 7);
    let w = random(&[k, f], 8);
    let upstream = random(&[b, f], 9);

    let mut fused = Tape::new();
    let (xv, wv, uv) = (
        fused.variable(x.clone()),
        fused.variable(w.clone()),
        fused.constant(upstream.clone()),
    );
    let out = fused.linear_max_pool(xv, wv).unwrap();
    let prod = fused.mul(out, uv).unwrap();
    let loss = fused.sum(prod);
    fused.backward(loss).unwrap();

    let mut plain = Tape::new();
    let (xp, wp, up) = (
        plain.variable(x),
        plain.variable(w),
        plain.constant(upstream),
    );
    let flat = plain.reshape(xp, &[b * n, k]).unwrap();
    let mm = plain.matmul(flat, wp).unwrap();
    let cube = plain.reshape(mm, &[b, n, f]).unwrap();
    let pooled = plain.max_pool_points(cube).unwrap();
    let prod = plain.mul(pooled, up).unwrap();
    let loss2 = plain.sum(prod);
    plain.backward(loss2).unwrap();

    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
    assert!(close(fused.value(out).data(), plain.value(pooled).data()));
    assert!(close(fused.grad(xv).unwrap(), plain.grad(xp).unwrap()));
    assert!(close(fused.grad(wv).unwrap(), plain.grad(wp).unwrap()));
}

#[test]
fn linear_max_pool_gradient_matches_finite_differences() {
    let inputs = [random(&[2, 6, 4], 10), random(&[4, 5], 11), random(&[2, 5], 12)];
    let err = max_grad_error(&inputs, |tape, v| {
        let p = tape.linear_max_pool(v[0], v[1]).unwrap();
        let w = tape.mul(p, v[2]).unwrap();
        tape.sum(w)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn log_softmax_uniform_and_shift_invariant() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 4], &[0.3, 0.3, 0.3, 0.3]));
    let y = tape.log_softmax(x).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 0.25f64.ln()).abs() < 1e-15);
    }

    let logits = [0.2, -1.3, 4.0, 0.7];
    let shifted: Vec<f64> = logits.iter().map(|v| v + 123.456).collect();
    let a = tape.constant(t(&[1, 4], &logits));
    let b = tape.constant(t(&[1, 4], &shifted));
    let la = tape.log_softmax(a).unwrap();
    let lb = tape.log_softmax(b).unwrap();
    for (p, q) in tape.value(la).data().iter().zip(tape.value(lb).data()) {
        assert!((p - q).abs() <= 1e-12);
    }
}

#[test]
fn log_softmax_rejects_single_class() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([2, 1]));
    assert!(matches!(tape.log_softmax(x), Err(Error::Contract(_))));
}

#[test]
fn log_softmax_and_softmax_gradients_match_finite_differences() {
    let inputs = [random(&[3, 5], 13), random(&[3, 5], 14)];
    let err = max_grad_error(&inputs, |tape, v| {
        let l = tape.log_softmax(v[0]).unwrap();
        let p = tape.mul(l, v[1]).unwrap();
        tape.sum(p)
    });
    assert!(err < 1e-6, "log_softmax rel err {err}");
    let err = max_grad_error(&inputs, |tape, v| {
        let l = tape.softmax(v[0]).unwrap();
        let p = tape.mul(l, v[1]).unwrap();
        tape.sum(p)
    });
    assert!(err < 1e-6, "softmax rel err {err}");
}

#[test]
fn nll_examples() {
    let mut tape = Tape::new();
    let perfect = tape.constant(t(&[1, 3], &[f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]));
    let loss = tape.nll_loss(perfect, &[1]).unwrap();
    assert_eq!(tape.value(loss).data(), &[0.0]);

    let c = 5usize;
    let lp = vec![(1.0 / c as f64).ln(); c];
    let uniform = tape.constant(t(&[1, c], &lp));
    let loss = tape.nll_loss(uniform, &[3]).unwrap();
    assert!((tape.value(loss).data()[0] - (c as f64).ln()).abs() < 1e-15);

    // mean of -(-0.5) and -(-2.0)
    let batch = tape.constant(t(&[2, 2], &[-0.5, -1.0, -3.0, -2.0]));
    let loss = tape.nll_loss(batch, &[0, 1]).unwrap();
    assert_eq!(tape.value(loss).data(), &[1.25]);

    assert!(matches!(
        tape.nll_loss(batch, &[0, 2]),
        Err(Error::Index { index: 2, len: 2 })
    ));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let inputs = [random(&[4, 3], 15)];
    let err = max_grad_error(&inputs, |tape, v| tape.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap());
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn add_bias_scale_add_gradients() {
    let inputs = [random(&[4, 3], 16), random(&[3], 17), random(&[4, 3], 18)];
    let err = max_grad_error(&inputs, |tape, v| {
        let a = tape.add_bias(v[0], v[1]).unwrap();
        let b = tape.add(a, v[2]).unwrap();
        let c = tape.scale(b, -1.7);
        let d = tape.mul(c, c).unwrap();
        tape.sum(d)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.variable(random(&[2, 3, 2], 19));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let x = tape.variable(t(&[1], &[3.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::zeros([2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn two_layer_mlp_gradients_match_finite_differences() {
    let inputs = [
        random(&[5, 4], 20),
        random(&[4, 6], 21),
        random(&[6], 22),
        random(&[6, 3], 23),
        random(&[3], 24),
    ];
    let err = max_grad_error(&inputs, |tape, v| {
        let h = tape.matmul(v[0], v[1]).unwrap();
        let h = tape.add_bias(h, v[2]).unwrap();
        let h = tape.relu(h);
        let o = tape.matmul(h, v[3]).unwrap();
        let o = tape.add_bias(o, v[4]).unwrap();
        tape.cross_entropy(o, &[0, 1, 2, 1, 0]).unwrap()
    });
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn companion_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2], &[3.0, 4.0]));
    let s = tape.add(a, b).unwrap();
    assert_eq!(tape.value(s).data(), &[4.0, 6.0]);

    let x = tape.variable(t(&[3], &[1.0, -2.0, 5.0]));
    let z = tape.scale(x, 0.0);
    assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    let l = tape.sum(z);
    tape.backward(l).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_grad_then_constant_backward_leaves_zero() {
    let mut tape = Tape::new();
    let x = tape.variable(t(&[2], &[1.0, 2.0]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    tape.zero_grad(&[x]);
    let c = tape.constant(Tensor::scalar(4.0));
    tape.backward(c).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn repeated_backward_accumulates_exactly_twice() {
    let mut tape = Tape::new();
    let x = tape.variable(random(&[3, 4], 25));
    let w = tape.variable(random(&[4, 2], 26));
    let h = tape.matmul(x, w).unwrap();
    let loss = tape.cross_entropy(h, &[0, 1, 1]).unwrap();
    tape.backward(loss).unwrap();
    let once: Vec<f64> = tape.grad(w).unwrap().to_vec();
    tape.backward(loss).unwrap();
    for (twice, one) in tape.grad(w).unwrap().iter().zip(&once) {
        assert_eq!(*twice, 2.0 * one);
    }
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.variable(t(&[2], &[1.0, 2.0]));
    let d = tape.detach(x);
    let s = tape.sum(d);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
}

proptest! {
    #[test]
    fn log_softmax_rows_normalize(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 5), 1..6)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let y = tape.log_softmax(x).unwrap();
        for r in tape.value(y).data().chunks(5) {
            let total: f64 = r.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn max_pool_is_permutation_invariant(seed in 0u64..1000, n in 1usize..12) {
        let x = random(&[1, n, 4], seed);
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut stream(seed, Stream::Shuffle));
        let mut shuffled = Vec::with_capacity(n * 4);
        for &p in &perm {
            shuffled.extend_from_slice(&x.data()[p * 4..(p + 1) * 4]);
        }
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(Tensor::new([1, n, 4], shuffled).unwrap());
        let pa = tape.max_pool_points(a).unwrap();
        let pb = tape.max_pool_points(b).unwrap();
        prop_assert_eq!(tape.value(pa).data(), tape.value(pb).data());
    }
}
