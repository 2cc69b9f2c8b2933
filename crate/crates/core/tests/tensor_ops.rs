use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rat_core::gradcheck;
use rat_core::tensor::{
    finite_diff_grad, max_rel_error, pixel_shuffle, pixel_unshuffle, Graph, Tensor,
};
use rat_core::Error;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * cout * h * wd];
    for n in 0..batch {
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w[((co * cin + ci) * 3 + ky) * 3 + kx]
                                    * x[((n * cin + ci) * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out[((n * cout + co) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn rel_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() / scale <= tol, "{x} vs {y}");
    }
}

#[test]
fn matmul_identity_and_small_case() {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::rand_uniform(&[3, 3], -1.0, 1.0, &mut rng);
    let i = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let p = g.matmul(i, av).unwrap();
    assert_eq!(g.value(p), &a);

    let x = g.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
    let y = g.constant(Tensor::from_f64(&[2, 1], &[1., 1.]).unwrap());
    let z = g.matmul(x, y).unwrap();
    assert_eq!(g.value(z).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::rand_uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(av, bv).unwrap();
        rel_close(
            g.value(c).data(),
            &naive_matmul(a.data(), b.data(), 5, 4, 3),
            1e-6,
        );
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2]));
    let s = g.softmax_lastdim(x, None).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let bias = Tensor::from_f64(&[2], &[0.0, -1000.0]).unwrap();
    let s = g.softmax_lastdim(x, Some(&bias)).unwrap();
    let v = g.value(s).data();
    assert!((v[0] - 1.0).abs() < 1e-12);
    assert!(v[1] <= 1e-300);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = g.constant(Tensor::rand_uniform(&[7], -5.0, 5.0, &mut rng));
    let s = g.softmax_lastdim(r, None).unwrap();
    let total: f64 = g.value(s).data().iter().sum();
    assert!((total - 1.0).abs() < 1e-6);
}

#[test]
fn layer_norm_constant_row_is_zero_and_mean_is_shift() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 5], 3.25));
    let gain = g.constant(Tensor::ones(&[5]));
    let shift = g.constant(Tensor::zeros(&[5]));
    let y = g.layer_norm(x, gain, shift, 1e-6).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = g.constant(Tensor::rand_uniform(&[3, 8], -2.0, 2.0, &mut rng));
    let shift = g.constant(Tensor::full(&[8], 0.7));
    let gain = gain_of(&mut g, 8);
    let y = g.layer_norm(x, gain, shift, 1e-6).unwrap();
    for row in g.value(y).data().chunks(8) {
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        assert!((mean - 0.7).abs() < 1e-9);
    }
}

fn gain_of(g: &mut Graph<f64>, c: usize) -> rat_core::Var {
    g.constant(Tensor::ones(&[c]))
}

#[test]
fn conv3x3_identity_and_box_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::rand_uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
    let mut w = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
    w.data_mut()[4] = 1.0; // (0,0,1,1)
    w.data_mut()[9 * 3 + 4] = 1.0; // (1,1,1,1)
    let mut g = Graph::new();
    let (xv, wv, bv) = (
        g.constant(x.clone()),
        g.constant(w),
        g.constant(Tensor::zeros(&[2])),
    );
    let y = g.conv3x3(xv, wv, bv).unwrap();
    assert_eq!(g.value(y), &x);

    let img =
        Tensor::<f64>::from_f64(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
    let (iv, ones, zb) = (
        g.constant(img),
        g.constant(Tensor::ones(&[1, 1, 3, 3])),
        g.constant(Tensor::zeros(&[1])),
    );
    let y = g.conv3x3(iv, ones, zb).unwrap();
    assert_eq!(g.value(y).data()[4], 45.0);
    assert_eq!(g.value(y).data()[0], 1. + 2. + 4. + 5.);
}

#[test]
fn conv3x3_matches_six_loop_oracle() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (batch, cin, cout, h, w) = (2, 3, 4, 6, 7);
        let x = Tensor::<f64>::rand_uniform(&[batch, cin, h, w], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::rand_uniform(&[cout, cin, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[cout], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (xv, kv, bv) = (
            g.constant(x.clone()),
            g.constant(k.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv3x3(xv, kv, bv).unwrap();
        let oracle = naive_conv(x.data(), k.data(), b.data(), batch, cin, cout, h, w);
        rel_close(g.value(y).data(), &oracle, 1e-5);
    }
}

#[test]
fn conv3x3_channel_mismatch() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(g.conv3x3(x, w, b), Err(Error::Dimension(_))));
}

#[test]
fn pixel_unshuffle_layout_and_errors() {
    let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
    let u = pixel_unshuffle(&x, 2).unwrap();
    assert_eq!(u.shape(), &[1, 4, 1, 1]);
    assert_eq!(u.data(), &[1., 2., 3., 4.]);

    let y = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
    assert_eq!(pixel_unshuffle(&y, 2).unwrap().shape(), &[1, 8, 2, 2]);
    assert!(matches!(
        pixel_unshuffle(&Tensor::<f32>::zeros(&[1, 1, 3, 4]), 2),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn small_op_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[2, 3], &[1., -2., 3., 0.5, 0., -1.]).unwrap());
    let w = g.constant(Tensor::eye(3));
    let b = g.constant(Tensor::zeros(&[3]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let z = g.constant(Tensor::zeros(&[1]));
    let gz = g.gelu(z);
    assert_eq!(g.value(gz).data(), &[0.0]);

    let v = g.constant(Tensor::from_f64(&[3], &[-1., 2., -3.]).unwrap());
    let s = g.abs_sum(v);
    assert_eq!(g.value(s).data(), &[6.0]);
}

#[test]
fn backward_simple_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xt = Tensor::<f64>::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let x = g.param(xt.clone());
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[3, 4]));

    let mut g = Graph::new();
    let x = g.param(xt.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let unused = g.param(Tensor::ones(&[2]));
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &xt.map(|v| 2.0 * v));
    assert!(grads.get(unused).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::ones(&[2]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn finite_diff_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::<f64>::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-4);
    assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-8));
    let g = finite_diff_grad(
        |t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(),
        &x,
        1e-4,
    );
    for (a, b) in g.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn finite_diff_agrees_with_backward_on_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::<f64>::rand_uniform(&[4, 6], -1.0, 1.0, &mut rng);
    let gain = Tensor::<f64>::rand_uniform(&[6], 0.5, 1.5, &mut rng);
    let shift = Tensor::<f64>::rand_uniform(&[6], -0.5, 0.5, &mut rng);
    let weights = Tensor::<f64>::rand_uniform(&[4, 6], -1.0, 1.0, &mut rng);
    let f = |xt: &Tensor<f64>| {
        let mut g = Graph::new();
        let (xv, gv, sv) = (
            g.param(xt.clone()),
            g.constant(gain.clone()),
            g.constant(shift.clone()),
        );
        let y = g.layer_norm(xv, gv, sv, 1e-6).unwrap();
        let w = g.constant(weights.clone());
        let p = g.mul(y, w).unwrap();
        let l = g.sum(p);
        (g, xv, l)
    };
    let (g, xv, l) = f(&x);
    let analytic = g.backward(l).unwrap().take(xv).unwrap();
    let numeric = finite_diff_grad(
        |t| {
            let (g, _, l) = f(t);
            g.value(l).data()[0]
        },
        &x,
        1e-4,
    );
    assert!(max_rel_error(&analytic, &numeric, gradcheck::REL_FLOOR) < 1e-4);
}

#[test]
fn every_op_passes_finite_differences_on_ten_seeds() {
    for seed in 0..10 {
        for r in gradcheck::op_suite(seed).unwrap() {
            assert!(
                r.passed(),
                "seed {seed}: {} rel err {:e}",
                r.name,
                r.max_rel_err
            );
        }
    }
}

proptest! {
    #[test]
    fn shuffle_roundtrip_is_exact(c in 1usize..4, hb in 1usize..4, wb in 1usize..4, r in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::rand_uniform(&[1, c, hb * r, wb * r], -1.0, 1.0, &mut rng);
        let back = pixel_shuffle(&pixel_unshuffle(&x, r).unwrap(), r).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn softmax_rows_normalized_and_shift_invariant(n in 1usize..12, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::rand_uniform(&[3, n], -10.0, 10.0, &mut rng);
        let row_shift: Vec<f64> = (0..3).flat_map(|r| vec![shift * r as f64; n]).collect();
        let shifted = Tensor::new(&[3, n], x.data().iter().zip(&row_shift).map(|(a, b)| a + b).collect()).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(x), g.constant(shifted));
        let (sa, sb) = (g.softmax_lastdim(a, None).unwrap(), g.softmax_lastdim(b, None).unwrap());
        for row in g.value(sa).data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }
}

#[test]
fn gradients_accumulate_across_fan_out() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let xt = Tensor::<f64>::rand_uniform(&[4], -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let x = g.param(xt);
    let a = g.mul_scalar(x, 2.0);
    let b = g.mul_scalar(x, 3.0);
    let c = g.add(a, b).unwrap();
    let s = g.sum(c);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 5.0));
}
