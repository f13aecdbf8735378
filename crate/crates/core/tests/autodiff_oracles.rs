//! Finite-difference and analytic oracles for the tape primitives.

mod common;

use common::{gradcheck, rand_tensor, weighted_sum};
use faultformer::autodiff::{gelu, Graph, Tensor};
use faultformer::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

#[test]
fn matmul_matches_identity_and_permutation() {
    let mut g = Graph::new();
    let i2 = g.constant(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
    let a = g.constant(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
    let p = g.constant(&[2, 2], vec![0., 1., 1., 0.]).unwrap();
    let ia = g.matmul(i2, a).unwrap();
    assert_eq!(g.value(ia), &[1., 2., 3., 4.]);
    let ap = g.matmul(a, p).unwrap();
    assert_eq!(g.value(ap), &[2., 1., 4., 3.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[7, 5], &mut rng);
    let b = rand_tensor(&[5, 3], &mut rng);
    let mut expected = vec![0.0; 21];
    for i in 0..7 {
        for j in 0..3 {
            for k in 0..5 {
                expected[i * 3 + j] += a.at(i, k) * b.at(k, j);
            }
        }
    }
    let mut g = Graph::new();
    let (av, bv) = (g.leaf(&a), g.leaf(&b));
    let c = g.matmul(av, bv).unwrap();
    for (x, y) in g.value(c).iter().zip(&expected) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let z = g.constant(&[4], vec![0.0; 4]).unwrap();
    let s = g.softmax(z).unwrap();
    assert_eq!(g.value(s), &[0.25; 4]);
    let z = g.constant(&[2], vec![2f64.ln(), 0.0]).unwrap();
    let s = g.softmax(z).unwrap();
    assert!((g.value(s)[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((g.value(s)[1] - 1.0 / 3.0).abs() < 1e-15);
    let z = g.constant(&[2], vec![f64::NAN, 0.0]).unwrap();
    assert!(matches!(g.softmax(z), Err(Error::Numeric { .. })));
}

/// Softmax evaluated with compensated summation and a shifted exponent,
/// independent of the graph kernel.
fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in &e {
        let y = v - c;
        let t = s + y;
        c = (t - s) - y;
        s = t;
    }
    e.iter().map(|v| v / s).collect()
}

#[test]
fn softmax_sums_to_one_and_is_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..40).map(|_| rng.random_range(-5.0..5.0)).collect();
    let mut g = Graph::new();
    let z = g.constant(&[40], x.clone()).unwrap();
    let s = g.softmax(z).unwrap();
    let total: f64 = g.value(s).iter().sum();
    assert!((total - 1.0).abs() <= 1e-12);
    for (a, b) in g.value(s).iter().zip(softmax_oracle(&x)) {
        assert!((a - b).abs() <= 1e-15);
    }
    let shifted: Vec<f64> = x.iter().map(|v| v + 123.0).collect();
    let z2 = g.constant(&[40], shifted).unwrap();
    let s2 = g.softmax(z2).unwrap();
    for (a, b) in g.value(s).iter().zip(g.value(s2)) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let one = g.constant(&[2], vec![1.0, 1.0]).unwrap();
    let zero = g.constant(&[2], vec![0.0, 0.0]).unwrap();
    let x = g.constant(&[1, 2], vec![1.0, -1.0]).unwrap();
    let y = g.layer_norm(x, one, zero, 1e-14).unwrap();
    assert!((g.value(y)[0] - 1.0).abs() < 1e-12);
    assert!((g.value(y)[1] + 1.0).abs() < 1e-12);

    let ones = g.constant(&[5], vec![1.0; 5]).unwrap();
    let fives = g.constant(&[5], vec![5.0; 5]).unwrap();
    let c = g.constant(&[1, 5], vec![3.3; 5]).unwrap();
    let y = g.layer_norm(c, ones, fives, 1e-5).unwrap();
    assert!(g.value(y).iter().all(|&v| (v - 5.0).abs() < 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let row = rand_tensor(&[1, 64], &mut rng);
    let zeros = g.constant(&[64], vec![0.0; 64]).unwrap();
    let g1 = g.constant(&[64], vec![1.0; 64]).unwrap();
    let r = g.leaf(&row);
    let y = g.layer_norm(r, g1, zeros, 1e-5).unwrap();
    let v = g.value(y);
    let mean = v.iter().sum::<f64>() / 64.0;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 64.0;
    assert!(mean.abs() <= 1e-10);
    assert!((var - 1.0).abs() <= 1e-4, "var {var}");

    let one1 = g.constant(&[1], vec![1.0]).unwrap();
    let zero1 = g.constant(&[1], vec![0.0]).unwrap();
    let x1 = g.constant(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
    assert!(matches!(g.layer_norm(x1, one1, zero1, 0.0), Err(Error::Numeric { .. })));
}

/// Phi(1) from the Taylor series of erf, summed to convergence.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-20 {
        n += 1.0;
        term *= -x * x / n;
        sum += term / (2.0 * n + 1.0);
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn gelu_examples() {
    assert_eq!(gelu(0.0), 0.0);
    assert!((gelu(10.0) - 10.0).abs() < 1e-9);
    let phi1 = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
    assert!((gelu(1.0) - phi1).abs() <= 1e-10);
}

#[test]
fn dropout_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let x = g.constant(&[100_000], vec![1.0; 100_000]).unwrap();
    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.3, false, &mut rng).unwrap(), x);
    assert!(matches!(g.dropout(x, 1.0, true, &mut rng), Err(Error::Parameter(_))));
    let y = g.dropout(x, 0.3, true, &mut rng).unwrap();
    let zeros = g.value(y).iter().filter(|&&v| v == 0.0).count() as f64;
    let n = 100_000.0;
    let sigma = (n * 0.3 * 0.7f64).sqrt();
    assert!((zeros - 0.3 * n).abs() <= 3.0 * sigma, "zeros {zeros}");
    assert!(g
        .value(y)
        .iter()
        .all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-15));
}

#[test]
fn backward_analytic_cases() {
    let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap().with_requires_grad(true);
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let sq = g.mul(xv, xv).unwrap();
    let root = g.sum(sq);
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.wrt(xv).unwrap(), &[1.0, -2.0, 4.0]);

    let x = Tensor::new([1], vec![0.7]).unwrap().with_requires_grad(true);
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let y = g.add(xv, xv).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(xv).unwrap(), &[2.0]);

    let z = Tensor::new([5], vec![0.1, -2.0, 3.0, 0.0, 1.5])
        .unwrap()
        .with_requires_grad(true);
    let mut g = Graph::new();
    let zv = g.leaf(&z);
    let loss = g.cross_entropy(zv, 2).unwrap();
    let probs = {
        let m = 3.0f64;
        let e: Vec<f64> = z.data().iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let grads = g.backward(loss).unwrap();
    for (j, (a, p)) in grads.wrt(zv).unwrap().iter().zip(&probs).enumerate() {
        let expected = p - if j == 2 { 1.0 } else { 0.0 };
        assert!((a - expected).abs() <= 1e-10);
    }
    assert!((g.scalar(loss) + probs[2].ln()).abs() < 1e-12);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.constant(&[2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn gradcheck_matmul_transpose_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = vec![
        rand_tensor(&[4, 3], &mut rng),
        rand_tensor(&[3, 5], &mut rng),
        rand_tensor(&[5, 4], &mut rng),
    ];
    let err = gradcheck(&inputs, |g, v| {
        let ab = g.matmul(v[0], v[1]).unwrap();
        let ct = g.transpose(v[2]).unwrap();
        let s = g.add(ab, ct).unwrap();
        weighted_sum(g, s, 1)
    });
    assert!(err <= TOL, "rel err {err}");
}

#[test]
fn gradcheck_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![
        rand_tensor(&[3, 4], &mut rng),
        rand_tensor(&[3, 4], &mut rng),
        rand_tensor(&[4], &mut rng),
    ];
    let err = gradcheck(&inputs, |g, v| {
        let m = g.mul(v[0], v[1]).unwrap();
        let b = g.add_row(m, v[2]).unwrap();
        let s = g.scale(b, 1.7);
        let a = g.gelu(s);
        weighted_sum(g, a, 2)
    });
    assert!(err <= TOL, "rel err {err}");
}

#[test]
fn gradcheck_softmax_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = vec![
        rand_tensor(&[3, 6], &mut rng),
        rand_tensor(&[6], &mut rng),
        rand_tensor(&[6], &mut rng),
    ];
    let err = gradcheck(&inputs, |g, v| {
        let s = g.softmax(v[0]).unwrap();
        let n = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        let p = g.add(s, n).unwrap();
        weighted_sum(g, p, 3)
    });
    assert!(err <= TOL, "rel err {err}");
}

#[test]
fn gradcheck_dropout_with_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = vec![rand_tensor(&[4, 5], &mut rng)];
    let err = gradcheck(&inputs, |g, v| {
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let d = g.dropout(v[0], 0.3, true, &mut r).unwrap();
        weighted_sum(g, d, 4)
    });
    assert!(err <= TOL, "rel err {err}");
}

#[test]
fn gradcheck_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let inputs = vec![rand_tensor(&[4, 6], &mut rng), rand_tensor(&[1, 6], &mut rng)];
    let err = gradcheck(&inputs, |g, v| {
        let a = g.slice_cols(v[0], 1, 3).unwrap();
        let b = g.slice_cols(v[0], 4, 2).unwrap();
        let c = g.concat_cols(&[b, a]).unwrap();
        let rows = g.concat_rows(&[v[1], v[0]]).unwrap();
        let r = g.slice_rows(rows, 0, 2).unwrap();
        let flat = g.reshape(r, &[12]).unwrap();
        let s1 = weighted_sum(g, c, 5);
        let s2 = weighted_sum(g, flat, 6);
        let m = g.mean(v[0]);
        g.mean_of(&[s1, s2, m]).unwrap()
    });
    assert!(err <= TOL, "rel err {err}");
}

#[test]
fn gradcheck_rope() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let inputs = vec![rand_tensor(&[5, 8], &mut rng)];
    let err = gradcheck(&inputs, |g, v| {
        let r = g.rope(v[0], &[0, 3, 7, 1, 20]).unwrap();
        weighted_sum(g, r, 7)
    });
    assert!(err <= TOL, "rel err {err}");
}

#[test]
fn gradcheck_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let inputs = vec![rand_tensor(&[6], &mut rng), rand_tensor(&[4, 3], &mut rng)];
    let target: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let err = gradcheck(&inputs, |g, v| {
        let ce = g.cross_entropy(v[0], 4).unwrap();
        let mse = g.masked_mse(v[1], &target, &[true, false, true, true]).unwrap();
        g.add(ce, mse).unwrap()
    });
    assert!(err <= TOL, "rel err {err}");
}

#[test]
fn masked_mse_ignores_unmasked_rows() {
    let pred = Tensor::new([3, 2], vec![1., 2., 3., 4., 5., 6.])
        .unwrap()
        .with_requires_grad(true);
    let mut g = Graph::new();
    let p = g.leaf(&pred);
    let loss = g.masked_mse(p, &[0.0; 6], &[false, true, false]).unwrap();
    assert_eq!(g.scalar(loss), (9.0 + 16.0) / 2.0);
    let grads = g.backward(loss).unwrap();
    let gp = grads.wrt(p).unwrap();
    assert_eq!(&gp[0..2], &[0.0, 0.0]);
    assert_eq!(&gp[4..6], &[0.0, 0.0]);
    assert_eq!(&gp[2..4], &[3.0, 4.0]);

    let mut g = Graph::new();
    let p = g.leaf(&pred);
    let loss = g.masked_mse(p, &[0.0; 6], &[false; 3]).unwrap();
    assert_eq!(g.scalar(loss), 0.0);
    let grads = g.backward(loss).unwrap();
    assert!(grads.wrt(p).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn gradcheck_conv_and_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let inputs = vec![
        rand_tensor(&[3, 11], &mut rng),
        rand_tensor(&[4, 3, 4], &mut rng),
        rand_tensor(&[4], &mut rng),
    ];
    let err = gradcheck(&inputs, |g, v| {
        let c = g.conv1d(v[0], v[1], v[2], 2, 2, 1).unwrap();
        let p = g.adaptive_avg_pool(c, 3).unwrap();
        let up = g.adaptive_avg_pool(c, 9).unwrap();
        let s1 = weighted_sum(g, p, 8);
        let s2 = weighted_sum(g, up, 9);
        g.add(s1, s2).unwrap()
    });
    assert!(err <= TOL, "rel err {err}");
}

#[test]
fn avg_pool_of_constant_is_constant() {
    let mut g = Graph::new();
    let x = g.constant(&[2, 300], vec![0.25; 600]).unwrap();
    let p = g.adaptive_avg_pool(x, 256).unwrap();
    assert_eq!(g.shape(p), &[2, 256]);
    assert!(g.value(p).iter().all(|&v| v == 0.25));
}

#[test]
fn same_seed_same_bits() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&[6, 6], &mut rng);
        let mut g = Graph::new();
        let av = g.leaf(&a);
        let d = g.dropout(av, 0.5, true, &mut rng).unwrap();
        let m = g.matmul(d, av).unwrap();
        let s = g.softmax(m).unwrap();
        g.value(s).to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
