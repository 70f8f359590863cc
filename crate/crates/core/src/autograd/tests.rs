use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{numeric_gradient, relative_error};
use super::{BackwardMode, Tape, Var};

fn rand_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks the tape gradient of `sum(f(x) * r)` against central differences.
fn check(shape: &[usize], seed: u64, tol: f64, f: impl for<'t> Fn(Var<'t, f64>) -> Var<'t, f64>) {
    let x0 = rand_array(shape, seed);
    let eval = |x: &ArrayD<f64>| -> (f64, ArrayD<f64>) {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let y = f(xv);
        let r = tape.constant(rand_array(&y.shape(), seed ^ 0xabcd));
        let loss = y.mul(r).sum();
        let g = tape.backward(loss);
        (loss.item(), g.get_or_zeros(xv))
    };
    let (_, analytic) = eval(&x0);
    let numeric = numeric_gradient(|x| eval(x).0, &x0, 1e-5);
    let err = relative_error(&analytic, &numeric, 1e-8);
    assert!(err < tol, "relative gradient error {err:e}");
}

#[test]
fn elementwise_ops() {
    check(&[3, 4], 1, 1e-7, |x| x.exp().add(x.tanh()).scale(0.5).add_scalar(2.0));
    check(&[3, 4], 2, 1e-7, |x| x.square().add_scalar(1.0).ln().sqrt());
    check(&[5], 3, 1e-7, |x| x.relu().add(x.leaky_relu(0.2)).neg());
}

#[test]
fn broadcast_binary_ops() {
    check(&[2, 3, 4, 4], 4, 1e-7, |x| {
        let t = x.tape();
        let c = t.constant(rand_array(&[2, 3, 1, 1], 9).mapv(|v| v + 2.0));
        x.mul(c).add(c).div(c.exp()).sub(c)
    });
    check(&[2, 3, 1, 1], 5, 1e-7, |g| {
        let t = g.tape();
        let x = t.constant(rand_array(&[2, 3, 4, 4], 10));
        x.mul(g).add(g).div(g.square().add_scalar(1.0))
    });
}

#[test]
fn reductions() {
    check(&[4, 6], 6, 1e-7, |x| x.sum_axis(0).add(x.mean_axis(1).sum()));
    check(&[4, 6], 7, 1e-7, |x| x.max_axis(0).add(x.min_axis(1).t().mean()));
    check(&[4, 6], 8, 1e-7, |x| x.mean());
}

#[test]
fn matrix_ops() {
    check(&[3, 5], 11, 1e-7, |x| {
        let w = x.tape().constant(rand_array(&[5, 2], 12));
        x.matmul(w).t().matmul(x).reshape(&[5, 2]).index_select(0, &[1, 1, 4])
    });
    check(&[3, 4], 13, 1e-7, |x| {
        let other = x.scale(2.0);
        Var::concat(&[x, other, x], 1)
    });
}

#[test]
fn log_softmax_and_pick() {
    check(&[4, 5], 14, 1e-7, |x| x.scale(3.0).log_softmax().pick_per_row(&[0, 4, 2, 2]));
    check(&[3, 6], 15, 1e-7, |x| x.log_softmax());
}

#[test]
fn conv_gradients() {
    for k in [1, 3] {
        check(&[2, 3, 5, 4], 16 + k as u64, 1e-6, |x| {
            let t = x.tape();
            let w = t.constant(rand_array(&[4, 3, k, k], 30));
            let b = t.constant(rand_array(&[4], 31));
            x.conv2d(w, Some(b))
        });
        check(&[4, 3, k, k], 20 + k as u64, 1e-6, |w| {
            let x = w.tape().constant(rand_array(&[2, 3, 5, 4], 32));
            x.conv2d(w, None)
        });
        check(&[4], 24, 1e-6, |b| {
            let t = b.tape();
            let x = t.constant(rand_array(&[2, 3, 5, 4], 33));
            let w = t.constant(rand_array(&[4, 3, k, k], 34));
            x.conv2d(w, Some(b))
        });
    }
}

#[test]
fn spatial_ops() {
    check(&[2, 3, 4, 6], 40, 1e-7, |x| x.maxpool2());
    check(&[2, 3, 4, 6], 41, 1e-7, |x| x.avgpool(2));
    check(&[1, 2, 3, 3], 42, 1e-7, |x| x.upsample2());
    check(&[2, 4, 3, 3], 43, 1e-7, |x| x.mfm());
    check(&[2, 3, 4, 5], 44, 1e-6, |x| x.instance_norm(1e-5));
    check(&[2, 3, 4, 5], 45, 1e-6, |x| x.scale(3.0).instance_norm(0.1).tanh());
}

/// Direct convolution used as an independent reference.
fn naive_conv(x: &ArrayD<f64>, w: &ArrayD<f64>) -> ArrayD<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut out = ArrayD::zeros(IxDyn(&[n, co, h, wd]));
    for b in 0..n {
        for o in 0..co {
            for y in 0..h as isize {
                for xx in 0..wd as isize {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let (sy, sx) = (y + ky - pad, xx + kx - pad);
                                if sy >= 0 && sx >= 0 && sy < h as isize && sx < wd as isize {
                                    acc += x[[b, c, sy as usize, sx as usize]]
                                        * w[[o, c, ky as usize, kx as usize]];
                                }
                            }
                        }
                    }
                    out[[b, o, y as usize, xx as usize]] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_convolution() {
    let x = rand_array(&[2, 3, 6, 5], 50);
    let w = rand_array(&[4, 3, 3, 3], 51);
    let tape = Tape::new();
    let y = tape.constant(x.clone()).conv2d(tape.constant(w.clone()), None);
    let expect = naive_conv(&x, &w);
    assert!(relative_error(&y.value(), &expect, 1e-12) < 1e-12);
}

#[test]
fn maxpool_and_mfm_ties_pick_first() {
    let tape = Tape::<f64>::new();
    let x = tape.var(ArrayD::from_elem(IxDyn(&[1, 2, 2, 2]), 1.0));
    let g = tape.backward(x.maxpool2().sum());
    let gx = g.get(x).unwrap();
    assert_eq!(gx.iter().filter(|&&v| v == 1.0).count(), 2);
    assert_eq!(gx[[0, 0, 0, 0]], 1.0);
    assert_eq!(gx[[0, 1, 0, 0]], 1.0);

    let tape = Tape::<f64>::new();
    let x = tape.var(ArrayD::from_elem(IxDyn(&[1, 2, 1, 1]), 0.5));
    let g = tape.backward(x.mfm().sum());
    assert_eq!(g.get(x).unwrap().as_slice().unwrap(), &[1.0, 0.0]);
}

#[test]
fn guided_mode_clamps_negative_signal() {
    let tape = Tape::<f64>::new();
    let x = tape.var(ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0, 2.0, -1.0, 3.0]).unwrap());
    let w = tape.constant(ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0, -1.0, 1.0, 2.0]).unwrap());
    let out = x.relu().mul(w).sum();
    let std = tape.backward_with(out, BackwardMode::Standard);
    let guided = tape.backward_with(out, BackwardMode::Guided);
    assert_eq!(std.get(x).unwrap().as_slice().unwrap(), &[1.0, -1.0, 0.0, 2.0]);
    assert_eq!(guided.get(x).unwrap().as_slice().unwrap(), &[1.0, 0.0, 0.0, 2.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::<f64>::new();
    let c = tape.constant(rand_array(&[3], 1));
    let v = tape.var(rand_array(&[3], 2));
    let g = tape.backward(c.mul(v).sum());
    assert!(g.get(c).is_none());
    assert!(g.get(v).is_some());
}

#[test]
fn instance_norm_of_constant_plane_is_zero() {
    let tape = Tape::<f64>::new();
    let x = tape.var(ArrayD::from_elem(IxDyn(&[1, 1, 3, 3]), 4.0));
    let y = x.instance_norm(1e-5);
    assert!(y.value().iter().all(|v| v.abs() < 1e-12));
    let g = tape.backward(y.sum());
    assert!(g.get(x).unwrap().iter().all(|v| v.is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_gradient_matches_finite_differences(seed in 0u64..10_000, h in 2usize..5, w in 2usize..5) {
        let x0 = rand_array(&[1, 2, h, w], seed);
        let k = rand_array(&[2, 2, 3, 3], seed + 1);
        let f = |x: &ArrayD<f64>| {
            let t = Tape::new();
            t.constant(x.clone()).conv2d(t.constant(k.clone()), None).square().sum().item()
        };
        let tape = Tape::new();
        let xv = tape.var(x0.clone());
        let loss = xv.conv2d(tape.constant(k.clone()), None).square().sum();
        let analytic = tape.backward(loss).get_or_zeros(xv);
        let numeric = numeric_gradient(f, &x0, 1e-5);
        prop_assert!(relative_error(&analytic, &numeric, 1e-8) < 1e-6);
    }

    #[test]
    fn log_softmax_rows_normalise(seed in 0u64..10_000, n in 1usize..5, k in 2usize..7) {
        let tape = Tape::<f64>::new();
        let y = tape.constant(rand_array(&[n, k], seed).mapv(|v| v * 20.0)).log_softmax();
        let v = y.value();
        for r in 0..n {
            let s: f64 = (0..k).map(|c| v[[r, c]].exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
