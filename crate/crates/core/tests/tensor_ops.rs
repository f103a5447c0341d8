mod common;

use proptest::prelude::*;
use smaformer::gradcheck::{grad_check, DEFAULT_STEP};
use smaformer::tape::DIFFERENTIABLE_OPS;
use smaformer::{format, verify, Error, Tape, Tensor, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, common::randn_vec(n, &mut common::rng(seed))).unwrap()
}

fn eval(f: impl FnOnce(&mut Tape<f64>) -> smaformer::Result<Var>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let out = f(&mut tape).unwrap();
    tape.value(out).clone()
}

// ---------------------------------------------------------------- matmul

#[test]
fn matmul_identity() {
    let b = t(&[2, 2], &[3., 4., 5., 6.]);
    let out = eval(|tp| {
        let a = tp.constant(Tensor::eye(2));
        let b = tp.constant(b.clone());
        tp.matmul(a, b)
    });
    assert_eq!(out.data(), &[3., 4., 5., 6.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let (a, b) = ([1., 2., 3., 4.], [5., 6., 7., 8.]);
    let want = common::matmul(&a, &b, 2, 2, 2);
    assert_eq!(want, vec![19., 22., 43., 50.]);
    let out = eval(|tp| {
        let a = tp.constant(t(&[2, 2], &a));
        let b = tp.constant(t(&[2, 2], &b));
        tp.matmul(a, b)
    });
    assert_eq!(out.data(), want.as_slice());

    let (x, y) = (randn(&[7, 5], 1), randn(&[5, 3], 2));
    let out = eval(|tp| {
        let a = tp.constant(x.clone());
        let b = tp.constant(y.clone());
        tp.matmul(a, b)
    });
    common::assert_close(out.data(), &common::matmul(x.data(), y.data(), 7, 5, 3), 1e-12);
}

#[test]
fn matmul_zero_annihilates() {
    let out = eval(|tp| {
        let a = tp.constant(Tensor::zeros(&[3, 5]));
        let b = tp.constant(randn(&[5, 2], 3));
        tp.matmul(a, b)
    });
    assert_eq!(out.shape(), &[3, 2]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tp = Tape::<f64>::new();
    let a = tp.constant(Tensor::zeros(&[2, 3]));
    let b = tp.constant(Tensor::zeros(&[4, 2]));
    let msg = tp.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

// ---------------------------------------------------------------- conv2d

#[test]
fn conv2d_unit_kernel_is_identity() {
    let x = randn(&[1, 5, 5], 4);
    let out = eval(|tp| {
        let xv = tp.constant(x.clone());
        let w = tp.constant(Tensor::ones(&[1, 1, 1, 1]));
        let b = tp.constant(Tensor::zeros(&[1]));
        tp.conv2d(xv, w, Some(b), 1, 0)
    });
    assert!(out.bitwise_eq(&x));
}

#[test]
fn conv2d_window_counts() {
    let x = vec![1.0; 16];
    let w = vec![1.0; 9];
    let (want, _, _) = common::conv2d(&x, &w, None, (1, 4, 4), 1, 3, 1, 1, 1);
    let out = eval(|tp| {
        let xv = tp.constant(t(&[1, 4, 4], &x));
        let wv = tp.constant(t(&[1, 1, 3, 3], &w));
        tp.conv2d(xv, wv, None, 1, 1)
    });
    assert_eq!(out.data(), want.as_slice());
    assert_eq!(out.get(&[0, 1, 1]), 9.0);
    assert_eq!(out.get(&[0, 2, 2]), 9.0);
    assert_eq!(out.get(&[0, 0, 0]), 4.0);
    assert_eq!(out.get(&[0, 3, 3]), 4.0);
}

#[test]
fn conv2d_stride_two_shape() {
    let out = eval(|tp| {
        let x = tp.constant(randn(&[1, 8, 8], 5));
        let w = tp.constant(randn(&[1, 1, 3, 3], 6));
        tp.conv2d(x, w, None, 2, 1)
    });
    assert_eq!(out.shape(), &[1, 4, 4]);
}

#[test]
fn conv2d_matches_direct_oracle() {
    for (k, stride, pad) in [(1, 1, 0), (3, 1, 1), (3, 2, 1), (7, 1, 3), (1, 2, 0)] {
        let x = randn(&[3, 9, 8], 10 + k as u64);
        let w = randn(&[4, 3, k, k], 20 + k as u64);
        let b = randn(&[4], 30);
        let (want, ho, wo) = common::conv2d(x.data(), w.data(), Some(b.data()), (3, 9, 8), 4, k, stride, pad, 1);
        let out = eval(|tp| {
            let xv = tp.constant(x.clone());
            let wv = tp.constant(w.clone());
            let bv = tp.constant(b.clone());
            tp.conv2d(xv, wv, Some(bv), stride, pad)
        });
        assert_eq!(out.shape(), &[4, ho, wo]);
        common::assert_close(out.data(), &want, 1e-12);
    }
}

#[test]
fn conv2d_same_padding_preserves_size() {
    for k in [1, 3, 7] {
        let out = eval(|tp| {
            let x = tp.constant(randn(&[2, 10, 6], 7));
            let w = tp.constant(randn(&[3, 2, k, k], 8));
            tp.conv2d(x, w, None, 1, (k - 1) / 2)
        });
        assert_eq!(out.shape(), &[3, 10, 6], "k = {k}");
    }
}

#[test]
fn conv2d_without_output_is_config_error() {
    let mut tp = Tape::<f64>::new();
    let x = tp.constant(Tensor::zeros(&[1, 2, 2]));
    let w = tp.constant(Tensor::zeros(&[1, 1, 7, 7]));
    assert!(matches!(tp.conv2d(x, w, None, 1, 0), Err(Error::Config(_))));
}

// ------------------------------------------------------ conv_transpose2d

#[test]
fn conv_transpose_scatters_kernel() {
    let (v, [a, b, c, d]) = (2.5, [1.0, -2.0, 3.0, 0.5]);
    let out = eval(|tp| {
        let x = tp.constant(t(&[1, 1, 1], &[v]));
        let w = tp.constant(t(&[1, 1, 2, 2], &[a, b, c, d]));
        tp.conv_transpose2d(x, w, None, 2)
    });
    assert_eq!(out.shape(), &[1, 2, 2]);
    assert_eq!(out.data(), &[v * a, v * b, v * c, v * d]);
}

#[test]
fn conv_transpose_matches_scatter_oracle() {
    let x = randn(&[4, 8, 8], 40);
    let w = randn(&[4, 2, 2, 2], 41);
    let out = eval(|tp| {
        let xv = tp.constant(x.clone());
        let wv = tp.constant(w.clone());
        tp.conv_transpose2d(xv, wv, None, 2)
    });
    assert_eq!(out.shape(), &[2, 16, 16]);
    common::assert_close(out.data(), &common::conv_transpose2x2(x.data(), w.data(), (4, 8, 8), 2), 1e-12);
}

#[test]
fn conv_transpose_zero_input() {
    let out = eval(|tp| {
        let x = tp.constant(Tensor::zeros(&[3, 4, 4]));
        let w = tp.constant(randn(&[3, 2, 2, 2], 42));
        tp.conv_transpose2d(x, w, None, 2)
    });
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_transpose_rejects_other_kernels() {
    let mut tp = Tape::<f64>::new();
    let x = tp.constant(Tensor::zeros(&[1, 4, 4]));
    let w = tp.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(tp.conv_transpose2d(x, w, None, 2), Err(Error::Config(_))));
}

// ------------------------------------------------------ depthwise_conv2d

#[test]
fn depthwise_delta_is_identity() {
    let x = randn(&[3, 6, 5], 50);
    let mut w = Tensor::<f64>::zeros(&[3, 1, 3, 3]);
    for c in 0..3 {
        w.set(&[c, 0, 1, 1], 1.0);
    }
    let out = eval(|tp| {
        let xv = tp.constant(x.clone());
        let wv = tp.constant(w.clone());
        tp.depthwise_conv2d(xv, wv, None, 1)
    });
    assert!(out.bitwise_eq(&x));
}

#[test]
fn depthwise_channels_are_independent() {
    let mut x = randn(&[2, 5, 5], 51);
    x.data_mut()[25..].iter_mut().for_each(|v| *v = 0.0);
    let out = eval(|tp| {
        let xv = tp.constant(x.clone());
        let wv = tp.constant(randn(&[2, 1, 3, 3], 52));
        let bv = tp.constant(t(&[2], &[0.0, 0.75]));
        tp.depthwise_conv2d(xv, wv, Some(bv), 1)
    });
    assert!(out.data()[25..].iter().all(|&v| v == 0.75));
}

#[test]
fn depthwise_equals_grouped_conv_bitwise() {
    let x = randn(&[3, 5, 5], 53);
    let w = randn(&[3, 1, 3, 3], 54);
    let b = randn(&[3], 55);
    let (want, _, _) = common::conv2d(x.data(), w.data(), Some(b.data()), (3, 5, 5), 3, 3, 1, 1, 3);
    let out = eval(|tp| {
        let xv = tp.constant(x.clone());
        let wv = tp.constant(w.clone());
        let bv = tp.constant(b.clone());
        tp.depthwise_conv2d(xv, wv, Some(bv), 1)
    });
    let same = out.data().iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same, "{:?}\n{:?}", out.data(), want);
}

#[test]
fn depthwise_channel_mismatch() {
    let mut tp = Tape::<f64>::new();
    let x = tp.constant(Tensor::zeros(&[3, 4, 4]));
    let w = tp.constant(Tensor::zeros(&[2, 1, 3, 3]));
    assert!(tp.depthwise_conv2d(x, w, None, 1).is_err());
}

// ---------------------------------------------------------------- linear

#[test]
fn linear_examples() {
    let x = randn(&[4, 3], 60);
    let out = eval(|tp| {
        let xv = tp.constant(x.clone());
        let w = tp.constant(Tensor::eye(3));
        let b = tp.constant(Tensor::zeros(&[3]));
        tp.linear(xv, w, Some(b))
    });
    assert_eq!(out.data(), x.data());

    let out = eval(|tp| {
        let xv = tp.constant(t(&[1, 2], &[1., 1.]));
        let w = tp.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tp.constant(t(&[2], &[10., 10.]));
        tp.linear(xv, w, Some(b))
    });
    assert_eq!(out.data(), &[14., 16.]);

    let out = eval(|tp| {
        let xv = tp.constant(Tensor::zeros(&[0, 2]));
        let w = tp.constant(t(&[2, 3], &[1.; 6]));
        let b = tp.constant(Tensor::zeros(&[3]));
        tp.linear(xv, w, Some(b))
    });
    assert_eq!(out.shape(), &[0, 3]);
}

// ------------------------------------------------------------ layer_norm

fn ln(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor<f64> {
    let d = gamma.len();
    eval(|tp| {
        let xv = tp.constant(x.clone());
        let g = tp.constant(t(&[d], gamma));
        let b = tp.constant(t(&[d], beta));
        tp.layer_norm(xv, g, b, eps)
    })
}

#[test]
fn layer_norm_examples() {
    let out = ln(&t(&[1, 4], &[3.; 4]), &[1.; 4], &[0.; 4], 1e-5);
    assert!(out.data().iter().all(|&v| v == 0.0));

    let out = ln(&t(&[1, 2], &[1., -1.]), &[1.; 2], &[0.; 2], 1e-14);
    common::assert_close(out.data(), &[1., -1.], 1e-12);

    let out = ln(&randn(&[3, 5], 61), &[0.; 5], &[1., 2., 3., 4., 5.], 1e-5);
    for r in 0..3 {
        assert_eq!(&out.data()[r * 5..(r + 1) * 5], &[1., 2., 3., 4., 5.]);
    }
}

#[test]
fn layer_norm_matches_oracle_and_normalizes() {
    let x = randn(&[6, 8], 62);
    let (g, b) = (randn(&[8], 63), randn(&[8], 64));
    let out = ln(&x, g.data(), b.data(), 1e-5);
    common::assert_close(out.data(), &common::layer_norm(x.data(), 6, 8, g.data(), b.data(), 1e-5), 1e-12);

    let out = ln(&x, &[1.; 8], &[0.; 8], 1e-5);
    for row in out.data().chunks(8) {
        let mu = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 8.0;
        assert!(mu.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

// ----------------------------------------------------------- activations

fn unary(f: fn(&mut Tape<f64>, Var) -> smaformer::Result<Var>, x: &[f64]) -> Vec<f64> {
    eval(|tp| {
        let v = tp.constant(t(&[x.len()], x));
        f(tp, v)
    })
    .into_data()
}

#[test]
fn activation_values() {
    assert_eq!(unary(Tape::gelu, &[0.0]), vec![0.0]);
    assert_eq!(unary(Tape::relu, &[-3.0]), vec![0.0]);
    assert_eq!(unary(Tape::sigmoid, &[0.0]), vec![0.5]);
    let g1 = unary(Tape::gelu, &[1.0])[0];
    assert!((g1 - common::gelu(1.0)).abs() < 1e-12);
    assert!((g1 - 0.8413447).abs() < 1e-7);
    let xs = randn(&[32], 70);
    let want: Vec<f64> = xs.data().iter().map(|&x| common::gelu(x)).collect();
    common::assert_close(&unary(Tape::gelu, xs.data()), &want, 1e-12);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let out = eval(|tp| {
        let v = tp.constant(t(&[1, 2], &[0., 0.]));
        tp.softmax(v, 1)
    });
    assert_eq!(out.data(), &[0.5, 0.5]);
}

fn softmax_rows(x: &Tensor<f64>) -> Tensor<f64> {
    eval(|tp| {
        let v = tp.constant(x.clone());
        tp.softmax(v, 1)
    })
}

proptest! {
    #![proptest_config(common::cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 5), 1..6),
        shift in -100.0f64..100.0,
    ) {
        let n = rows.len();
        let x = Tensor::new(&[n, 5], rows.concat()).unwrap();
        let p = softmax_rows(&x);
        for (r, row) in p.data().chunks(5).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            common::assert_close(row, &common::softmax(&x.data()[r * 5..(r + 1) * 5]), 1e-12);
        }
        let shifted = softmax_rows(&x.map(|v| v + shift));
        for (a, b) in p.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn gelu_agrees_with_series(x in -3.0f64..3.0) {
        let got = unary(Tape::gelu, &[x])[0];
        prop_assert!((got - common::gelu(x)).abs() < 1e-12);
    }

    #[test]
    fn relu_and_sigmoid_ranges(x in -50.0f64..50.0) {
        prop_assert!(unary(Tape::relu, &[x])[0] >= 0.0);
        let s = unary(Tape::sigmoid, &[x])[0];
        prop_assert!((0.0..=1.0).contains(&s));
    }
}

// ------------------------------------------------------ pooled statistics

#[test]
fn pooled_statistics_of_constant() {
    let mut tp = Tape::<f64>::new();
    let x = tp.constant(Tensor::full(&[3, 2, 4], 1.25));
    let s = tp.pooled_statistics(x).unwrap();
    assert!(tp.value(s.channel_avg).data().iter().all(|&v| v == 1.25));
    assert!(tp.value(s.spatial_mean).data().iter().all(|&v| v == 1.25));
    assert!(tp.value(s.spatial_max).data().iter().all(|&v| v == 1.25));
    assert_eq!(tp.shape(s.spatial_mean), &[1, 2, 4]);
}

#[test]
fn pooled_statistics_of_one_hot() {
    let mut x = Tensor::<f64>::zeros(&[2, 3, 3]);
    x.set(&[0, 1, 2], 6.0);
    let mut tp = Tape::<f64>::new();
    let xv = tp.constant(x);
    let s = tp.pooled_statistics(xv).unwrap();
    let direct: f64 = [6.0].iter().sum::<f64>() / 9.0;
    assert_eq!(tp.value(s.channel_avg).data(), &[direct, 0.0]);
    assert_eq!(tp.value(s.spatial_max).get(&[0, 1, 2]), 6.0);
    assert_eq!(tp.value(s.spatial_mean).get(&[0, 1, 2]), 3.0);
}

// -------------------------------------------------------------- backward

#[test]
fn backward_of_sum_is_ones() {
    let mut tp = Tape::<f64>::new();
    let x = tp.param(randn(&[2, 3], 80));
    let s = tp.sum(x).unwrap();
    tp.backward(s).unwrap();
    assert!(tp.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_of_square_sum() {
    let mut tp = Tape::<f64>::new();
    let x = tp.param(t(&[3], &[1., 2., 3.]));
    let sq = tp.mul(x, x).unwrap();
    let s = tp.sum(sq).unwrap();
    tp.backward(s).unwrap();
    assert_eq!(tp.grad(x).unwrap().data(), &[2., 4., 6.]);
    tp.backward(s).unwrap();
    assert_eq!(tp.grad(x).unwrap().data(), &[4., 8., 12.]);
    tp.zero_grad();
    assert!(tp.grad(x).is_none());
}

#[test]
fn detached_tensors_get_no_gradient() {
    let mut tp = Tape::<f64>::new();
    let x = tp.param(t(&[2], &[1., 2.]));
    let c = tp.constant(t(&[2], &[3., 4.]));
    let m = tp.mul(x, c).unwrap();
    let s = tp.sum(m).unwrap();
    tp.backward(s).unwrap();
    assert!(tp.grad(c).is_none());
    assert_eq!(tp.grad(x).unwrap().data(), &[3., 4.]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tp = Tape::<f64>::new();
    let x = tp.param(t(&[2], &[1., 2.]));
    let y = tp.scale(x, 2.0).unwrap();
    assert!(matches!(tp.backward(y), Err(Error::Contract(_))));
}

#[test]
fn non_finite_values_are_rejected() {
    assert!(matches!(Tensor::new(&[2], vec![1.0, f64::NAN]), Err(Error::NonFinite(_))));
    let mut tp = Tape::<f64>::new();
    tp.set_check_finite(true);
    let x = tp.constant(t(&[1], &[1e300]));
    assert!(matches!(tp.scale(x, 1e300), Err(Error::NonFinite(_))));
}

// ---------------------------------------------------------- grad checking

#[test]
fn grad_check_of_linear_function_is_exact() {
    let err = grad_check(|tp, x| tp.sum(x), &randn(&[10], 90), DEFAULT_STEP).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn grad_check_of_gelu() {
    let err = grad_check(
        |tp, x| {
            let g = tp.gelu(x)?;
            tp.sum(g)
        },
        &randn(&[16], 91),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn op_suite_covers_every_op_within_threshold() {
    let checks = verify::op_suite(&verify::DEFAULT_SEEDS).unwrap();
    let worst = verify::worst_per_op(&checks);
    assert_eq!(worst.len(), DIFFERENTIABLE_OPS.len());
    for op in DIFFERENTIABLE_OPS {
        let seeds: std::collections::BTreeSet<u64> = checks.iter().filter(|c| c.op == *op).map(|c| c.seed).collect();
        assert_eq!(seeds.len(), 5, "{op}");
    }
    for (op, err) in worst {
        assert!(err < verify::OP_THRESHOLD, "{op}: {err:e}");
    }
}

// ------------------------------------------------------------- adjoints

/// `(⟨L(x), y⟩, ⟨x, Lᵀ(y)⟩)` with `Lᵀ(y)` taken from the backward pass.
fn adjoint_pair(x: &Tensor<f64>, y: &Tensor<f64>, op: impl Fn(&mut Tape<f64>, Var) -> smaformer::Result<Var>) -> (f64, f64) {
    let mut tp = Tape::new();
    let xv = tp.param(x.clone());
    let out = op(&mut tp, xv).unwrap();
    let lx = tp.value(out).dot(y);
    let yv = tp.constant(y.clone());
    let m = tp.mul(out, yv).unwrap();
    let s = tp.sum(m).unwrap();
    tp.backward(s).unwrap();
    (lx, x.dot(tp.grad(xv).unwrap()))
}

fn assert_adjoint((a, b): (f64, f64)) {
    assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn conv2d_backward_is_adjoint() {
    for seed in 0..3 {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (7, 1, 3), (1, 2, 0)] {
            let w = randn(&[4, 3, k, k], 100 + seed);
            let x = randn(&[3, 8, 8], 200 + seed);
            let ho = (8 + 2 * pad - k) / stride + 1;
            let y = randn(&[4, ho, ho], 300 + seed);
            assert_adjoint(adjoint_pair(&x, &y, |tp, xv| {
                let wv = tp.constant(w.clone());
                tp.conv2d(xv, wv, None, stride, pad)
            }));
            // linear in the weight as well
            assert_adjoint(adjoint_pair(&w, &y, |tp, wv| {
                let xv = tp.constant(x.clone());
                tp.conv2d(xv, wv, None, stride, pad)
            }));
        }
    }
}

#[test]
fn conv_transpose_backward_is_adjoint() {
    for seed in 0..3 {
        let w = randn(&[4, 2, 2, 2], 110 + seed);
        let x = randn(&[4, 5, 6], 210 + seed);
        let y = randn(&[2, 10, 12], 310 + seed);
        assert_adjoint(adjoint_pair(&x, &y, |tp, xv| {
            let wv = tp.constant(w.clone());
            tp.conv_transpose2d(xv, wv, None, 2)
        }));
    }
}

#[test]
fn conv_transpose_is_adjoint_of_strided_conv() {
    let w = randn(&[4, 2, 2, 2], 120);
    let x = randn(&[4, 5, 6], 121);
    let y = randn(&[2, 10, 12], 122);
    let up = eval(|tp| {
        let xv = tp.constant(x.clone());
        let wv = tp.constant(w.clone());
        tp.conv_transpose2d(xv, wv, None, 2)
    });
    let down = eval(|tp| {
        let yv = tp.constant(y.clone());
        let wv = tp.constant(w.clone());
        tp.conv2d(yv, wv, None, 2, 0)
    });
    assert_adjoint((up.dot(&y), x.dot(&down)));
}

#[test]
fn depthwise_backward_is_adjoint() {
    for seed in 0..3 {
        let w = randn(&[3, 1, 3, 3], 130 + seed);
        let x = randn(&[3, 7, 5], 230 + seed);
        let y = randn(&[3, 7, 5], 330 + seed);
        assert_adjoint(adjoint_pair(&x, &y, |tp, xv| {
            let wv = tp.constant(w.clone());
            tp.depthwise_conv2d(xv, wv, None, 1)
        }));
        assert_adjoint(adjoint_pair(&w, &y, |tp, wv| {
            let xv = tp.constant(x.clone());
            tp.depthwise_conv2d(xv, wv, None, 1)
        }));
    }
}

// ----------------------------------------------------------- determinism

#[test]
fn randn_and_forward_are_deterministic() {
    let mut a = common::rng(5);
    let mut b = common::rng(5);
    let (x, y) = (Tensor::<f64>::randn(&[4, 6, 6], &mut a), Tensor::<f64>::randn(&[4, 6, 6], &mut b));
    assert!(x.bitwise_eq(&y));
    let run = |x: &Tensor<f64>| {
        eval(|tp| {
            let xv = tp.constant(x.clone());
            let w = tp.constant(randn(&[4, 4, 3, 3], 9));
            let c = tp.conv2d(xv, w, None, 1, 1)?;
            let g = tp.gelu(c)?;
            let tok = tp.patchify(g, 1)?;
            tp.softmax(tok, 1)
        })
    };
    assert!(run(&x).bitwise_eq(&run(&y)));
}

#[test]
fn patchify_round_trip_is_lossless() {
    for p in [1, 2, 4] {
        let x = randn(&[3, 8, 8], 140 + p as u64);
        let out = eval(|tp| {
            let xv = tp.constant(x.clone());
            let tok = tp.patchify(xv, p)?;
            tp.unpatchify(tok, [3, 8, 8], p)
        });
        assert!(out.bitwise_eq(&x), "p = {p}");
    }
}

// ---------------------------------------------------------- SMT1 format

#[test]
fn smt1_layout() {
    let x = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.0]).unwrap();
    let bytes = format::encode(&x);
    let mut want = b"SMT1".to_vec();
    want.extend([1u8, 2]);
    want.extend(2u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.extend(1.0f32.to_le_bytes());
    want.extend((-2.0f32).to_le_bytes());
    assert_eq!(bytes, want);
    assert_eq!(format::encode(&x.cast::<f64>())[4], 2);
}

#[test]
fn smt1_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let x = randn(&[3, 4, 5], 150);
    let (a, b) = (dir.path().join("a.smt"), dir.path().join("b.smt"));
    format::write(&a, &x).unwrap();
    let back: Tensor<f64> = format::read(&a).unwrap();
    assert!(back.bitwise_eq(&x));
    format::write(&b, &back).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn smt1_errors_carry_offsets() {
    let p = std::path::Path::new("x.smt");
    let good = format::encode(&randn(&[2, 3], 151));
    let offset = |r: smaformer::Result<Tensor<f64>>| match r {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {other:?}"),
    };
    let mut bad = good.clone();
    bad[0] = b'X';
    assert_eq!(offset(format::decode(&bad, p)), 0);
    let mut bad = good.clone();
    bad[4] = 9;
    assert_eq!(offset(format::decode(&bad, p)), 4);
    assert_eq!(offset(format::decode(&good[..good.len() - 3], p)), good.len() - 3);
    assert_eq!(offset(format::decode(&good[..8], p)), 6);
    let mut long = good.clone();
    long.push(0);
    assert_eq!(offset(format::decode(&long, p)), good.len());
    assert!(format::decode::<f32>(&good, p).is_err());
}

proptest! {
    #![proptest_config(common::cases(48))]

    #[test]
    fn smt1_encode_decode_identity(
        shape in prop::collection::vec(1usize..5, 1..4),
        seed in any::<u64>(),
    ) {
        let x = randn(&shape, seed);
        let bytes = format::encode(&x);
        let back: Tensor<f64> = format::decode(&bytes, std::path::Path::new("p")).unwrap();
        prop_assert!(back.bitwise_eq(&x));
        prop_assert_eq!(format::encode(&back), bytes);
    }
}
