use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::gradcheck::{finite_diff_check, GradCheckOptions};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Direct sliding-window convolution, one output element at a time.
fn conv_direct(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let coutg = cout / groups;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    for s in 0..n {
        for co in 0..cout {
            let grp = co / coutg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cg {
                        let cin_idx = grp * cg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((s * cin + cin_idx) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((co * cg + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((s * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv_value(x: &Tensor, w: &Tensor, b: Option<&Tensor>, s: usize, p: usize, g: usize) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let out = tape.conv2d(xv, wv, bv, s, p, g).unwrap();
    tape.value(out).clone()
}

// ---------------------------------------------------------------- conv2d

#[test]
fn conv_ones_sum_to_nine() {
    let out = conv_value(&Tensor::ones(&[1, 1, 3, 3]), &Tensor::ones(&[1, 1, 3, 3]), None, 1, 0, 1);
    assert_eq!(out.shape(), &[1, 1, 1, 1]);
    assert_eq!(out.data(), &[9.0]);
}

#[test]
fn conv_stem_shape() {
    let mut r = rng(1);
    let x = Tensor::randn(&[1, 3, 224, 224], 1.0, &mut r);
    let w = Tensor::randn(&[96, 3, 4, 4], 0.02, &mut r);
    let out = conv_value(&x, &w, None, 4, 0, 1);
    assert_eq!(out.shape(), &[1, 96, 56, 56]);
}

#[test]
fn depthwise_conv_matches_direct_loops() {
    let mut r = rng(2);
    let x = Tensor::randn(&[2, 4, 8, 8], 1.0, &mut r);
    let w = Tensor::randn(&[4, 1, 7, 7], 1.0, &mut r);
    let b = Tensor::randn(&[4], 1.0, &mut r);
    let fast = conv_value(&x, &w, Some(&b), 1, 3, 4);
    let slow = conv_direct(&x, &w, Some(&b), 1, 3, 4);
    assert!(fast.max_abs_diff(&slow) < 1e-9);
}

#[test]
fn grouped_strided_conv_matches_direct_loops() {
    let mut r = rng(3);
    let x = Tensor::randn(&[2, 6, 9, 7], 1.0, &mut r);
    let w = Tensor::randn(&[4, 3, 3, 2], 1.0, &mut r);
    let fast = conv_value(&x, &w, None, 2, 1, 2);
    let slow = conv_direct(&x, &w, None, 2, 1, 2);
    assert_eq!(fast.shape(), slow.shape());
    assert!(fast.max_abs_diff(&slow) < 1e-9);
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
    let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
    let err = tape.conv2d(x, w, None, 1, 1, 1).unwrap_err();
    assert!(err.to_string().contains("in-channels"), "{err}");

    let w = tape.constant(Tensor::zeros(&[4, 1, 3, 3]));
    let err = tape.conv2d(x, w, None, 1, 1, 2).unwrap_err();
    assert!(err.to_string().contains("groups"), "{err}");

    let w = tape.constant(Tensor::zeros(&[4, 3, 11, 3]));
    let err = tape.conv2d(x, w, None, 1, 1, 1).unwrap_err();
    assert!(err.to_string().contains("height"), "{err}");
}

proptest! {
    #[test]
    fn conv_output_size_formula(h in 1usize..12, p in 0usize..3, k in 1usize..5, s in 1usize..4) {
        prop_assume!(h + 2 * p >= k);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, h, h]));
        let w = tape.constant(Tensor::ones(&[1, 1, k, k]));
        let out = tape.conv2d(x, w, None, s, p, 1).unwrap();
        let expect = (h + 2 * p - k) / s + 1;
        prop_assert_eq!(tape.shape(out), &[1, 1, expect, expect]);
    }
}

// ---------------------------------------------------------------- linear

#[test]
fn linear_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[1.0, 2.0]));
    let w = tape.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);

    let z = tape.constant(Tensor::zeros(&[2]));
    let b2 = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
    let y = tape.linear(z, w, Some(b2)).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0]);
}

#[test]
fn linear_matches_dot_products() {
    let mut r = rng(4);
    let x = Tensor::randn(&[3, 5], 1.0, &mut r);
    let w = Tensor::randn(&[4, 5], 1.0, &mut r);
    let b = Tensor::randn(&[4], 1.0, &mut r);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.linear(xv, wv, Some(bv)).unwrap();
    for i in 0..3 {
        for o in 0..4 {
            let dot: f64 = (0..5).map(|j| x.data()[i * 5 + j] * w.data()[o * 5 + j]).sum();
            let got = tape.value(y).data()[i * 4 + o];
            assert!((got - dot - b.data()[o]).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_dimension_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    let w = tape.constant(Tensor::zeros(&[4, 5]));
    assert!(matches!(tape.linear(x, w, None), Err(Error::Shape { .. })));
}

// ---------------------------------------------------------------- layer norm

fn ln(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let mut tape = Tape::new();
    let (xv, g, b) = (
        tape.constant(x.clone()),
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
    );
    let y = tape.layer_norm(xv, g, b, eps).unwrap();
    tape.value(y).clone()
}

#[test]
fn layer_norm_examples() {
    let y = ln(&Tensor::ones(&[3]), &Tensor::ones(&[3]), &Tensor::zeros(&[3]), 1e-6);
    assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    let y = ln(&t(&[2], &[-1.0, 1.0]), &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-6);
    assert!((y.data()[0] + 1.0).abs() < 1e-3 && (y.data()[1] - 1.0).abs() < 1e-3);
}

#[test]
fn layer_norm_matches_direct_formula() {
    let mut r = rng(5);
    let x = Tensor::randn(&[7], 2.0, &mut r);
    let g = Tensor::randn(&[7], 1.0, &mut r);
    let b = Tensor::randn(&[7], 1.0, &mut r);
    let y = ln(&x, &g, &b, 1e-5);
    let mean = x.sum() / 7.0;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
    for i in 0..7 {
        let expect = (x.data()[i] - mean) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i];
        assert!((y.data()[i] - expect).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------- gelu

/// Φ(x) by composite Simpson integration of the normal density from -12.
fn phi_by_quadrature(x: f64) -> f64 {
    let a = -12.0;
    let n = 20_000;
    let h = (x - a) / n as f64;
    let pdf = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(a) + pdf(x);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * pdf(a + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn gelu_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 10.0, 1.0]));
    let y = tape.gelu(x);
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-6);
    assert!((v[2] - phi_by_quadrature(1.0)).abs() < 1e-9);
    assert!((v[2] - 0.841_344_746_068_543).abs() < 1e-9);
}

// ---------------------------------------------------------------- softmax

fn softmax_of(data: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[data.len()], data));
    let y = tape.softmax(x, 0).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax_of(&[0.0, 0.0]), vec![0.5, 0.5]);
    let s = softmax_of(&[1000.0, 0.0]);
    assert!(s.iter().all(|v| v.is_finite()));
    assert!((s[0] - 1.0).abs() < 1e-12 && s[1] < 1e-300);

    let x: [f64; 4] = [0.3, -1.2, 2.5, 0.0];
    let z: f64 = x.iter().map(|v| v.exp()).sum();
    for (got, xv) in softmax_of(&x).iter().zip(x) {
        assert!((got - xv.exp() / z).abs() < 1e-12);
    }
}

#[test]
fn softmax_on_inner_axis() {
    let mut r = rng(6);
    let x = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = tape.softmax(xv, 1).unwrap();
    let d = tape.value(y).data();
    for o in 0..2 {
        for i in 0..4 {
            let s: f64 = (0..3).map(|k| d[(o * 3 + k) * 4 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        row in proptest::collection::vec(-50.0f64..50.0, 1..10),
        shift in -100.0f64..100.0,
    ) {
        let a = softmax_of(&row);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(a.iter().all(|&v| v > 0.0 && v <= 1.0));
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let b = softmax_of(&shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

// ---------------------------------------------------------------- pooling / resampling

fn pool(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.adaptive_avg_pool2d(xv, oh, ow).unwrap();
    tape.value(y).clone()
}

#[test]
fn pool_examples() {
    let y = pool(&Tensor::full(&[1, 1, 4, 4], 3.0), 2, 2);
    assert_eq!(y.data(), &[3.0; 4]);
    let y = pool(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), 1, 1);
    assert_eq!(y.data(), &[2.5]);
}

#[test]
fn pool_matches_bin_loops() {
    let mut r = rng(7);
    let x = Tensor::randn(&[1, 1, 6, 6], 1.0, &mut r);
    let y = pool(&x, 3, 3);
    for by in 0..3 {
        for bx in 0..3 {
            let (y0, y1) = ((by * 6) / 3, ((by + 1) * 6 + 2) / 3);
            let (x0, x1) = ((bx * 6) / 3, ((bx + 1) * 6 + 2) / 3);
            let mut s = 0.0;
            let mut n = 0.0;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    s += x.data()[yy * 6 + xx];
                    n += 1.0;
                }
            }
            assert!((y.data()[by * 3 + bx] - s / n).abs() < 1e-12);
        }
    }
}

#[test]
fn pool_rejects_bad_target() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
    assert!(tape.adaptive_avg_pool2d(x, 5, 1).is_err());
    assert!(tape.adaptive_avg_pool2d(x, 0, 1).is_err());
}

fn upsample(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.upsample_bilinear(xv, oh, ow).unwrap();
    tape.value(y).clone()
}

#[test]
fn upsample_examples() {
    let y = upsample(&Tensor::full(&[1, 2, 3, 3], -1.5), 6, 6);
    assert!(y.data().iter().all(|&v| (v + 1.5).abs() < 1e-15));
    let y = upsample(&t(&[1, 1, 1, 2], &[0.0, 1.0]), 1, 4);
    assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    let mut r = rng(8);
    let x = Tensor::randn(&[1, 2, 3, 5], 1.0, &mut r);
    assert_eq!(upsample(&x, 3, 5), x);
}

#[test]
fn upsample_rejects_downscale() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
    assert!(tape.upsample_bilinear(x, 2, 4).is_err());
}

// ---------------------------------------------------------------- add / concat / reductions

#[test]
fn add_and_broadcast_examples() {
    let mut r = rng(9);
    let x = Tensor::randn(&[2, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let z = tape.constant(Tensor::zeros(&[2, 3]));
    let y = tape.add(xv, z).unwrap();
    assert_eq!(tape.value(y), &x);

    let zeros = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let v = tape.constant(t(&[2], &[1.0, 2.0]));
    let y = tape.add_channels(zeros, v).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);

    let bad = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.add_channels(zeros, bad).is_err());
    assert!(tape.add(xv, bad).is_err());
}

#[test]
fn broadcast_gradient_counts_positions() {
    let (n, c, h, w) = (3, 2, 4, 5);
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[n, c, h, w]));
    let v = tape.param(t(&[c], &[0.1, 0.2]));
    let y = tape.add_channels(x, v).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(v).unwrap().data(), &[(n * h * w) as f64; 2]);
}

#[test]
fn concat_slice_round_trip() {
    let mut r = rng(10);
    let a = Tensor::randn(&[1, 2], 1.0, &mut r);
    let b = Tensor::randn(&[1, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.concat(&[av, bv], 1).unwrap();
    assert_eq!(tape.shape(c), &[1, 5]);
    let a2 = tape.narrow(c, 1, 0, 2).unwrap();
    let b2 = tape.narrow(c, 1, 2, 3).unwrap();
    assert_eq!(tape.value(a2), &a);
    assert_eq!(tape.value(b2), &b);

    let wrong = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(tape.concat(&[av, wrong], 1).is_err());
}

#[test]
fn global_avg_pool_of_constant() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 3, 4, 4], 1.25));
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.shape(y), &[2, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 1.25));
}

#[test]
fn permute_round_trip() {
    let mut r = rng(11);
    let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.to_channels_last(xv).unwrap();
    assert_eq!(tape.shape(y), &[2, 4, 5, 3]);
    assert_eq!(tape.value(y).data()[1], x.data()[20]);
    let z = tape.to_channels_first(y).unwrap();
    assert_eq!(tape.value(z), &x);
}

// ---------------------------------------------------------------- backward

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2, 3]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);

    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_and_second_call() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::BackwardTwice)));
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::ones(&[2]));
    let c = tape.constant(Tensor::ones(&[2]));
    let y = tape.mul(x, c).unwrap();
    let unused = tape.param(Tensor::ones(&[2]));
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).is_some());
    assert!(tape.grad(c).is_none());
    assert!(tape.grad(unused).is_none());
}

// ---------------------------------------------------------------- finite differences

fn check(params: Vec<Tensor>, tol: f64, f: impl Fn(&mut Tape, &[Var]) -> crate::Result<Var>) {
    let report = finite_diff_check(f, &params, &GradCheckOptions::default()).unwrap();
    assert!(
        report.max_rel_error() < tol,
        "max rel error {} >= {tol}: {:?}",
        report.max_rel_error(),
        report.params
    );
}

/// Weighted sum so that every output coordinate carries a distinct gradient.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let mut r = rng(seed);
    let w = Tensor::randn(tape.shape(y), 1.0, &mut r);
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

#[test]
fn fd_conv2d() {
    let mut r = rng(20);
    let params = vec![
        Tensor::randn(&[2, 4, 6, 5], 1.0, &mut r),
        Tensor::randn(&[6, 2, 3, 3], 0.5, &mut r),
        Tensor::randn(&[6], 0.5, &mut r),
    ];
    check(params, 1e-4, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1, 2)?;
        probe(t, y, 1)
    });
}

#[test]
fn fd_depthwise_conv2d() {
    let mut r = rng(21);
    let params = vec![
        Tensor::randn(&[1, 3, 8, 8], 1.0, &mut r),
        Tensor::randn(&[3, 1, 7, 7], 0.5, &mut r),
    ];
    check(params, 1e-4, |t, v| {
        let y = t.conv2d(v[0], v[1], None, 1, 3, 3)?;
        probe(t, y, 2)
    });
}

#[test]
fn fd_linear() {
    let mut r = rng(22);
    let params = vec![
        Tensor::randn(&[2, 3, 5], 1.0, &mut r),
        Tensor::randn(&[4, 5], 1.0, &mut r),
        Tensor::randn(&[4], 1.0, &mut r),
    ];
    check(params, 1e-4, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        probe(t, y, 3)
    });
}

#[test]
fn fd_layer_norm() {
    let mut r = rng(23);
    let params = vec![
        Tensor::randn(&[3, 6], 1.0, &mut r),
        Tensor::randn(&[6], 1.0, &mut r),
        Tensor::randn(&[6], 1.0, &mut r),
    ];
    check(params, 1e-4, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
        probe(t, y, 4)
    });
}

#[test]
fn fd_smooth_elementwise() {
    let mut r = rng(24);
    check(vec![Tensor::randn(&[20], 1.5, &mut r)], 1e-7, |t, v| {
        let y = t.gelu(v[0]);
        probe(t, y, 5)
    });
    check(vec![Tensor::randn(&[3, 4], 1.0, &mut r)], 1e-7, |t, v| {
        let y = t.softmax(v[0], 1)?;
        probe(t, y, 6)
    });
    check(
        vec![Tensor::randn(&[8], 1.0, &mut r), Tensor::from_fn(&[8], |i| 1.0 + i as f64 * 0.1)],
        1e-7,
        |t, v| {
            let y = t.div(v[0], v[1])?;
            let y = t.mul(y, v[0])?;
            let y = t.sub(y, v[1])?;
            probe(t, y, 7)
        },
    );
}

#[test]
fn fd_pool_upsample_broadcast() {
    let mut r = rng(25);
    check(vec![Tensor::randn(&[1, 2, 7, 6], 1.0, &mut r)], 1e-4, |t, v| {
        let y = t.adaptive_avg_pool2d(v[0], 3, 4)?;
        probe(t, y, 8)
    });
    check(vec![Tensor::randn(&[1, 2, 3, 4], 1.0, &mut r)], 1e-4, |t, v| {
        let y = t.upsample_bilinear(v[0], 7, 9)?;
        probe(t, y, 9)
    });
    check(
        vec![Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r), Tensor::randn(&[2, 3], 1.0, &mut r)],
        1e-4,
        |t, v| {
            let y = t.add_channels(v[0], v[1])?;
            probe(t, y, 10)
        },
    );
}

#[test]
fn fd_structural_ops() {
    let mut r = rng(26);
    check(
        vec![Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r), Tensor::randn(&[2, 1, 2, 2], 1.0, &mut r)],
        1e-4,
        |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let n = t.narrow(c, 1, 1, 3)?;
            let p = t.to_channels_last(n)?;
            let scale = t_const(t, &[3], 11);
            let s = t.mul_last_dim(p, scale)?;
            let g = t.to_channels_first(s)?;
            let gap = t.global_avg_pool(g)?;
            let k = t.sum_keep_axis(gap, 1)?;
            let m = t.mean(k);
            let sc = t.scale(m, 3.0);
            Ok(t.add_scalar(sc, 1.0))
        },
    );
}

fn t_const(tape: &mut Tape, shape: &[usize], seed: u64) -> Var {
    let mut r = rng(seed);
    tape.constant(Tensor::randn(shape, 1.0, &mut r))
}

#[test]
fn fd_cross_entropy() {
    let mut r = rng(27);
    let labels = vec![0, 2, 1, 1, 0, 2, 2, 1];
    check(vec![Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r)], 1e-7, move |t, v| {
        t.softmax_cross_entropy(v[0], &labels)
    });
}

#[test]
fn composite_graph_matches_finite_differences() {
    // conv -> layer norm -> gelu -> linear -> cross entropy
    let mut r = rng(28);
    let params = vec![
        Tensor::randn(&[4, 2, 3, 3], 0.5, &mut r),
        Tensor::randn(&[4], 0.1, &mut r),
        Tensor::from_fn(&[4], |i| 1.0 + 0.1 * i as f64),
        Tensor::randn(&[4], 0.1, &mut r),
        Tensor::randn(&[3, 4], 0.5, &mut r),
        Tensor::randn(&[3], 0.1, &mut r),
    ];
    let image = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut r);
    check(params, 1e-4, move |t, v| {
        let x = t.constant(image.clone());
        let y = t.conv2d(x, v[0], Some(v[1]), 1, 1, 1)?;
        let y = t.to_channels_last(y)?;
        let y = t.layer_norm(y, v[2], v[3], 1e-6)?;
        let y = t.gelu(y);
        let y = t.to_channels_first(y)?;
        let y = t.global_avg_pool(y)?;
        let y = t.linear(y, v[4], Some(v[5]))?;
        t.softmax_cross_entropy(y, &[2, 0])
    });
}

#[test]
fn ops_are_bit_reproducible() {
    let run = || {
        let mut r = rng(30);
        let x = Tensor::randn(&[1, 3, 9, 9], 1.0, &mut r);
        let w = Tensor::randn(&[5, 3, 3, 3], 1.0, &mut r);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.param(x), tape.param(w));
        let y = tape.conv2d(xv, wv, None, 2, 1, 1).unwrap();
        let y = tape.gelu(y);
        let y = tape.upsample_bilinear(y, 10, 10).unwrap();
        let l = probe(&mut tape, y, 3).unwrap();
        tape.backward(l).unwrap();
        (tape.value(l).clone(), tape.grad(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}
