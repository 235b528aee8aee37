//! Primitive operations checked against independent naive implementations
//! and central differences.

use guidenet::numeric::gradcheck::{grad_check, GradCheckOptions};
use guidenet::numeric::{BnMode, Graph, RunningStats, Tensor, Var};
use guidenet::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Direct six-loop cross-correlation over `[C_in, H, W]`.
fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x.data()[(ci * h + iy as usize) * w + ix as usize]
                                    * k.data()[((co * c_in + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn named(blocks: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    blocks.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Weighted sum with fixed pseudo-random coefficients, so every output
/// element carries a distinct upstream gradient.
fn probe_loss(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.618).sin());
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    assert!(max_diff(g.value(c).data(), &naive_matmul(a.data(), b.data(), 4, 5, 3)) < 1e-12);
}

#[test]
fn conv_matches_six_loop_oracle() {
    let mut r = rng(2);
    let x = Tensor::uniform(&[3, 8, 8], -1.0, 1.0, &mut r);
    let k = Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let (vx, vk) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d(vx, vk, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[4, 8, 8]);
    assert!(max_diff(g.value(y).data(), &naive_conv(&x, &k, 1, 1)) < 1e-10);
}

#[test]
fn batched_conv_equals_per_sample_conv() {
    let mut r = rng(3);
    let x = Tensor::uniform(&[3, 2, 7, 6], -1.0, 1.0, &mut r);
    let k = Tensor::uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let (vx, vk) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d(vx, vk, 2, 1).unwrap();
    let per = 2 * 7 * 6;
    let mut want = Vec::new();
    for n in 0..3 {
        let xs = Tensor::new(&[2, 7, 6], x.data()[n * per..(n + 1) * per].to_vec()).unwrap();
        want.extend(naive_conv(&xs, &k, 2, 1));
    }
    assert!(max_diff(g.value(y).data(), &want) < 1e-10);
}

#[test]
fn batchnorm_output_moments() {
    let mut r = rng(4);
    let x = Tensor::uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut r);
    let channel = |data: &[f64], c: usize| -> Vec<f64> { (0..4).flat_map(|n| data[(n * 2 + c) * 9..][..9].to_vec()).collect() };
    let moments = |vals: &[f64]| {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    };
    let mut g = Graph::new();
    let vx = g.constant(x.clone());
    let gamma = g.constant(Tensor::full(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    let mut stats = RunningStats::new(2);
    let y = g.batchnorm2d(vx, gamma, beta, &mut stats, BnMode::Train).unwrap();
    for c in 0..2 {
        let (_, var_in) = moments(&channel(x.data(), c));
        let (mean, var) = moments(&channel(g.value(y).data(), c));
        assert!(mean.abs() < 1e-10, "mean {mean}");
        // The epsilon in the denominator shrinks the variance to var/(var+eps).
        let corrected = var * (var_in + guidenet::numeric::BN_EPSILON) / var_in;
        assert!((corrected - 1.0).abs() < 1e-6, "variance {var}, corrected {corrected}");
    }
}

#[test]
fn batchnorm_eval_is_bitwise_deterministic() {
    let mut r = rng(5);
    let x = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut r);
    let mut stats = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 2.0, 1.5] };
    let run = |stats: &mut RunningStats| {
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let gamma = g.constant(Tensor::full(&[3], 1.3));
        let beta = g.constant(Tensor::full(&[3], -0.4));
        let y = g.batchnorm2d(vx, gamma, beta, stats, BnMode::Eval).unwrap();
        g.value(y).clone()
    };
    let before = stats.clone();
    let a = run(&mut stats);
    let b = run(&mut stats);
    assert_eq!(a.data(), b.data());
    assert_eq!(stats, before);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(6);
    let mut g = Graph::new();
    let x = g.constant(Tensor::uniform(&[5, 7], -4.0, 4.0, &mut r));
    let y = g.softmax_rows(x).unwrap();
    for row in g.value(y).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn concat_gradients_match_separate_graphs() {
    let mut r = rng(7);
    let a = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[3, 3, 3], -1.0, 1.0, &mut r);
    let wa = Tensor::from_fn(&[2, 3, 3], |i| ((i + 1) as f64 * 0.618).sin());
    let wb = Tensor::from_fn(&[3, 3, 3], |i| ((i + 19) as f64 * 0.618).sin());

    let mut g = Graph::new();
    let (va, vb) = (g.param(a.clone()), g.param(b.clone()));
    let c = g.concat_channels(va, vb).unwrap();
    let loss = probe_loss(&mut g, c).unwrap();
    g.backward(loss).unwrap();

    for (input, weights, joint) in [(&a, &wa, g.grad(va).unwrap()), (&b, &wb, g.grad(vb).unwrap())] {
        let mut h = Graph::new();
        let v = h.param(input.clone());
        let w = h.constant(weights.clone());
        let p = h.mul(v, w).unwrap();
        let s = h.sum(p).unwrap();
        h.backward(s).unwrap();
        assert_eq!(h.grad(v).unwrap(), joint);
    }
}

#[test]
fn second_backward_doubles_gradients_exactly() {
    let mut r = rng(8);
    let mut g = Graph::new();
    let x = g.param(Tensor::uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut r));
    let k = g.param(Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r));
    let y = g.conv2d(x, k, 1, 1).unwrap();
    let y = g.relu(y).unwrap();
    let loss = probe_loss(&mut g, y).unwrap();
    g.backward(loss).unwrap();
    let once = (g.grad(x).unwrap().clone(), g.grad(k).unwrap().clone());
    g.backward(loss).unwrap();
    for (one, two) in [(&once.0, g.grad(x).unwrap()), (&once.1, g.grad(k).unwrap())] {
        for (a, b) in one.data().iter().zip(two.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

// ── Central-difference checks for every primitive ──────────────────────

fn check(blocks: Vec<(&str, Tensor)>, tol: f64, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let report = grad_check(&named(blocks), f, &GradCheckOptions::default()).unwrap();
    for b in &report.blocks {
        assert!(b.max_rel_error < tol, "{} rel error {}", b.name, b.max_rel_error);
    }
}

#[test]
fn gradcheck_matmul_and_batch_matmul() {
    let mut r = rng(10);
    check(
        vec![("a", Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r)), ("b", Tensor::uniform(&[4, 2], -1.0, 1.0, &mut r))],
        1e-6,
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe_loss(g, y)
        },
    );
    check(
        vec![("a", Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut r)), ("b", Tensor::uniform(&[2, 4, 5], -1.0, 1.0, &mut r))],
        1e-6,
        |g, v| {
            let y = g.batch_matmul(v[0], v[1])?;
            let y = g.transpose(y)?;
            probe_loss(g, y)
        },
    );
}

#[test]
fn gradcheck_conv2d() {
    let mut r = rng(11);
    check(
        vec![("input", Tensor::uniform(&[2, 3, 6, 5], -1.0, 1.0, &mut r)), ("kernel", Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r))],
        1e-5,
        |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1)?;
            probe_loss(g, y)
        },
    );
}

#[test]
fn gradcheck_batchnorm_train_and_eval() {
    let blocks = || {
        let mut r = rng(12);
        vec![
            ("x", Tensor::uniform(&[3, 2, 2, 3], -1.0, 1.0, &mut r)),
            ("gamma", Tensor::uniform(&[2], 0.5, 1.5, &mut r)),
            ("beta", Tensor::uniform(&[2], -1.0, 1.0, &mut r)),
        ]
    };
    for mode in [BnMode::Train, BnMode::Eval] {
        check(blocks(), 1e-4, move |g, v| {
            let mut stats = RunningStats { mean: vec![0.2, -0.1], var: vec![0.7, 1.4] };
            let y = g.batchnorm2d(v[0], v[1], v[2], &mut stats, mode)?;
            probe_loss(g, y)
        });
    }
}

#[test]
fn gradcheck_relu_away_from_kink() {
    let mut r = rng(13);
    let x = Tensor::from_fn(&[4, 6], |_| {
        let v: f64 = r.gen_range(1e-3..1.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    check(vec![("x", x)], 1e-6, |g, v| {
        let y = g.relu(v[0])?;
        probe_loss(g, y)
    });
}

#[test]
fn gradcheck_softmax_pool_embedding_loss() {
    let mut r = rng(14);
    check(vec![("x", Tensor::uniform(&[3, 5], -1.0, 1.0, &mut r))], 1e-4, |g, v| {
        let y = g.softmax_rows(v[0])?;
        probe_loss(g, y)
    });
    check(vec![("x", Tensor::uniform(&[2, 3, 7, 5], -1.0, 1.0, &mut r))], 1e-4, |g, v| {
        let y = g.adaptive_avg_pool2d(v[0], 3, 2)?;
        let y = g.global_avg_pool(y)?;
        probe_loss(g, y)
    });
    check(vec![("table", Tensor::uniform(&[5, 3], -1.0, 1.0, &mut r))], 1e-4, |g, v| {
        let y = g.embedding(v[0], &[4, 1, 1, 0, 3, 4], &[2, 3])?;
        probe_loss(g, y)
    });
    check(
        vec![("logits", Tensor::uniform(&[4, 3], -1.0, 1.0, &mut r)), ("bias", Tensor::uniform(&[3], -1.0, 1.0, &mut r))],
        1e-4,
        |g, v| {
            let y = g.add_row_bias(v[0], v[1])?;
            g.cross_entropy(y, &[0, 2, 1, 2])
        },
    );
    check(
        vec![
            ("a", Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r)),
            ("b", Tensor::uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut r)),
            ("bias", Tensor::uniform(&[3], -1.0, 1.0, &mut r)),
        ],
        1e-4,
        |g, v| {
            let c = g.concat_channels(v[0], v[1])?;
            let c = g.add_channel_bias(c, v[2])?;
            let c = g.reshape(c, &[2, 3, 9])?;
            let c = g.scale(c, 0.7)?;
            let m = g.mean(c)?;
            let m = g.reshape(m, &[1])?;
            let p = probe_loss(g, c)?;
            let p = g.reshape(p, &[1])?;
            let both = g.concat(&[m, p], 0)?;
            let sq = g.mul(both, both)?;
            g.sum(sq)
        },
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conv_oracle_random_shapes(
        c_in in 1usize..=4, c_out in 1usize..=4, h in 3usize..=8, w in 3usize..=8,
        kh in 1usize..=3, kw in 1usize..=3, stride in 1usize..=2, pad in 0usize..=1, seed in 0u64..1000,
    ) {
        let mut r = rng(seed);
        let x = Tensor::uniform(&[c_in, h, w], -1.0, 1.0, &mut r);
        let k = Tensor::uniform(&[c_out, c_in, kh, kw], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let (vx, vk) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(vx, vk, stride, pad).unwrap();
        prop_assert!(max_diff(g.value(y).data(), &naive_conv(&x, &k, stride, pad)) < 1e-10);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in 0u64..1000, spread in 0.1f64..50.0) {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[rows, cols], -spread, spread, &mut r));
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
