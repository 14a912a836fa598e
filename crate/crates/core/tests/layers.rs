//! Layer outputs against direct-summation oracles and tape gradients against
//! central finite differences, all in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sslab::gradcheck::{allclose, finite_diff_grad};
use sslab::nn::{batchnorm2d, conv2d, maxpool2d, softmax_cross_entropy, BatchNormStats, Mode};
use sslab::sparsity::topk;
use sslab::viz::gram_var;
use sslab::{Tape, Tensor, TopKConfig, Variant};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oc, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c {
                    for u in 0..kh {
                        for v in 0..kw {
                            let (y, xx) = ((i + u) as isize - pad as isize, (j + v) as isize - pad as isize);
                            if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                continue;
                            }
                            let xi = x.data()[(ci * h + y as usize) * wd + xx as usize];
                            acc += w.data()[((o * c + ci) * kh + u) * kw + v] * xi;
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = acc + b.data()[o];
            }
        }
    }
    Tensor::new(vec![oc, oh, ow], out).unwrap()
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for pad in [0, 1] {
        let x = random(&[2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = conv2d(&mut tape, xv, wv, bv, 1, pad).unwrap();
        assert_eq!(tape.value(y), &conv_oracle(&x, &w, &b, pad));
    }
}

/// Checks d(Σ r ⊙ f(x)) / dx against finite differences for a fixed
/// projection `r` that depends on `salt`.
fn check_input_grad(x: &Tensor<f64>, salt: usize, f: impl Fn(&mut Tape<f64>, sslab::Var) -> sslab::Var) {
    let weights = |shape: &[usize]| Tensor::from_fn(shape, |i| 0.5 + ((i * 7919 + salt * 131) % 101) as f64 / 101.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv);
    let r = weights(tape.shape(y));
    let proj = tape.mul_const(y, &r).unwrap();
    let l = tape.sum(proj).unwrap();
    let analytic = tape.backward(l).unwrap().wrt(xv).unwrap();
    let numeric = finite_diff_grad(
        |q| {
            let mut t = Tape::new();
            let qv = t.constant(q.clone());
            let y = f(&mut t, qv);
            Ok(t.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
        },
        x,
        1e-6,
    )
    .unwrap();
    if let Err(at) = allclose(&analytic, &numeric, 1e-4, 1e-8) {
        panic!("mismatch at {at}: {} vs {}", analytic.data()[at], numeric.data()[at]);
    }
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    check_input_grad(&x, 1, |t, xv| {
        let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
        conv2d(t, xv, wv, bv, 1, 1).unwrap()
    });
    check_input_grad(&w, 2, |t, wv| {
        let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
        conv2d(t, xv, wv, bv, 1, 1).unwrap()
    });
    check_input_grad(&b, 3, |t, bv| {
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        conv2d(t, xv, wv, bv, 1, 1).unwrap()
    });
}

#[test]
fn maxpool_gradient_at_tie_free_input() {
    let x = Tensor::from_fn(&[1, 2, 4, 6], |i| ((i * 37) % 48) as f64 / 10.0);
    check_input_grad(&x, 4, |t, xv| maxpool2d(t, xv, 2, 2).unwrap());
}

#[test]
fn batchnorm_gradients_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[3, 2, 3, 3], &mut rng);
    let gamma = Tensor::new(vec![2], vec![1.3, -0.7]).unwrap();
    let beta = Tensor::new(vec![2], vec![0.2, 0.1]).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let bn = |t: &mut Tape<f64>, xv, gv, bv| {
            let mut stats = BatchNormStats::new(2);
            batchnorm2d(t, xv, gv, bv, &mut stats, mode).unwrap()
        };
        check_input_grad(&x, 6, |t, xv| {
            let (gv, bv) = (t.constant(gamma.clone()), t.constant(beta.clone()));
            bn(t, xv, gv, bv)
        });
        check_input_grad(&gamma, 7, |t, gv| {
            let (xv, bv) = (t.constant(x.clone()), t.constant(beta.clone()));
            bn(t, xv, gv, bv)
        });
        check_input_grad(&beta, 8, |t, bv| {
            let (xv, gv) = (t.constant(x.clone()), t.constant(gamma.clone()));
            bn(t, xv, gv, bv)
        });
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = random(&[4, 5], &mut rng);
    let labels = [0, 3, 4, 1];
    let mut tape = Tape::new();
    let lv = tape.leaf(logits.clone());
    let l = softmax_cross_entropy(&mut tape, lv, &labels).unwrap();
    let g = tape.backward(l).unwrap().wrt(lv).unwrap();
    for (r, row) in logits.data().chunks(5).enumerate() {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for (c, v) in row.iter().enumerate() {
            let expect = (v.exp() / z - f64::from(u8::from(labels[r] == c))) / 4.0;
            assert!((g.data()[r * 5 + c] - expect).abs() < 1e-12);
        }
    }
    check_input_grad(&logits, 10, |t, lv| softmax_cross_entropy(t, lv, &labels).unwrap());
}

#[test]
fn gram_and_topk_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[3, 4, 4], &mut rng);
    check_input_grad(&x, 13, |t, xv| gram_var(t, xv).unwrap());
    for variant in [Variant::Hard, Variant::MeanReplacement] {
        let cfg = TopKConfig::new(0.3, variant).unwrap();
        check_input_grad(&x, 14, |t, xv| topk(t, xv, &cfg).unwrap().0);
    }
}
