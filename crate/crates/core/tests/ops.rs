use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsan::autodiff::kernels::{conv2d_backward_data, ConvGeom};
use rsan::check::{check_fn, CheckConfig};
use rsan::{Error, Graph, Padding, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(y * r)` for a fixed random `r`, so every output element carries a
/// distinct weight.
fn weighted_sum(g: &mut Graph<f64>, y: rsan::Var, seed: u64) -> rsan::Result<rsan::Var> {
    let r = g.leaf(random(g.shape(y), seed));
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let [n, h, w, ci] = x.nhwc("x").unwrap();
    let (kh, kw, co) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let (oh, ow) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
    let mut out = vec![0.0; n * oh * ow * co];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let (iy, ix) = (oy + ky, ox + kx);
                            if iy < pad || ix < pad || iy - pad >= h || ix - pad >= w {
                                continue;
                            }
                            for c in 0..ci {
                                acc += x.data()[((b * h + iy - pad) * w + ix - pad) * ci + c]
                                    * k.data()[((ky * kw + kx) * ci + c) * co + o];
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * co + o] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, oh, ow, co], out).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "element {i}: {x} vs {y}");
    }
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::ones(&[1, 3, 3, 1]).unwrap());
    let k = g.leaf(Tensor::ones(&[1, 1, 1, 1]).unwrap());
    let y = g.conv2d(x, k, None, 1, Padding::Same).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn conv_center_of_ones_kernel_is_45() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_vec(&[1, 3, 3, 1], (1..=9).map(f64::from).collect()).unwrap());
    let k = g.leaf(Tensor::ones(&[3, 3, 1, 1]).unwrap());
    let y = g.conv2d(x, k, None, 1, Padding::Same).unwrap();
    assert_eq!(g.value(y).data()[4], 45.0);
    // corners see four pixels
    assert_eq!(g.value(y).data()[0], 1.0 + 2.0 + 4.0 + 5.0);
}

#[test]
fn conv_matches_nested_loops() {
    for (i, &(h, w, ci, co, kk)) in [(5, 7, 3, 4, 3), (8, 8, 2, 1, 7), (6, 4, 5, 3, 1)].iter().enumerate() {
        let x = random(&[2, h, w, ci], i as u64);
        let k = random(&[kk, kk, ci, co], 100 + i as u64);
        let mut g = Graph::<f64>::new();
        let (xv, kv) = (g.leaf(x.clone()), g.leaf(k.clone()));
        let same = g.conv2d(xv, kv, None, 1, Padding::Same).unwrap();
        let valid = g.conv2d(xv, kv, None, 1, Padding::Valid).unwrap();
        assert_close(g.value(same).data(), conv_oracle(&x, &k, kk / 2).data(), 1e-12);
        assert_close(g.value(valid).data(), conv_oracle(&x, &k, 0).data(), 1e-12);
    }
}

#[test]
fn conv_bias_and_shape_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[1, 4, 4, 2]).unwrap());
    let k = g.leaf(Tensor::zeros(&[3, 3, 2, 3]).unwrap());
    let b = g.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.conv2d(x, k, Some(b), 1, Padding::Same).unwrap();
    assert_eq!(&g.value(y).data()[..3], &[1.0, 2.0, 3.0]);

    let wrong = g.leaf(Tensor::zeros(&[3, 3, 5, 3]).unwrap());
    match g.conv2d(x, wrong, None, 1, Padding::Same) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![1, 4, 4, 2]);
            assert_eq!(rhs, vec![3, 3, 5, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    let even = g.leaf(Tensor::zeros(&[2, 2, 2, 1]).unwrap());
    assert!(g.conv2d(x, even, None, 1, Padding::Same).is_err());
}

#[test]
fn conv_gradients() {
    let x = random(&[1, 6, 5, 3], 1);
    let k = random(&[3, 3, 3, 2], 2);
    let b = random(&[2], 3);
    let r = check_fn(&[x.clone(), k.clone(), b], &CheckConfig::default(), |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same)?;
        weighted_sum(g, y, 9)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    // plain sum, as in the defining example
    let r = check_fn(&[x, k], &CheckConfig::default(), |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, Padding::Same)?;
        g.sum(y)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn transpose_spreads_and_doubles() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::ones(&[1, 1, 1, 1]).unwrap());
    let k = g.leaf(Tensor::ones(&[2, 2, 1, 1]).unwrap());
    let y = g.conv2d_transpose(x, k, None, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 2, 1]);
    assert!(g.value(y).data().iter().all(|&v| v == 1.0));

    let x = g.leaf(random(&[1, 2, 2, 1], 4));
    let y = g.conv2d_transpose(x, k, None, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 4, 1]);
}

#[test]
fn transpose_is_adjoint_of_strided_conv() {
    // <T(x), y> == <x, C(y)> where C is the stride-2 valid conv with the same kernel.
    for seed in 0..5 {
        let (cin, cout) = (3, 2);
        let x = random(&[2, 3, 4, cin], seed);
        let k = random(&[2, 2, cout, cin], 10 + seed);
        let y = random(&[2, 6, 8, cout], 20 + seed);
        let mut g = Graph::<f64>::new();
        let (xv, kv, yv) = (g.leaf(x.clone()), g.leaf(k.clone()), g.leaf(y.clone()));
        let t = g.conv2d_transpose(xv, kv, None, 2).unwrap();
        let c = g.conv2d(yv, kv, None, 2, Padding::Valid).unwrap();
        let lhs: f64 = g.value(t).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(g.value(c).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");

        // forward of the transpose equals the data-gradient pass of that conv
        let geom = ConvGeom::new([2, 6, 8, cout], k.shape(), 2, Padding::Valid).unwrap();
        let back = conv2d_backward_data(x.data(), &geom, k.data());
        assert_close(g.value(t).data(), &back, 1e-12);
    }
}

#[test]
fn transpose_gradients() {
    let x = random(&[1, 3, 2, 3], 5);
    let k = random(&[2, 2, 2, 3], 6);
    let b = random(&[2], 7);
    let r = check_fn(&[x, k, b], &CheckConfig::default(), |g, v| {
        let y = g.conv2d_transpose(v[0], v[1], Some(v[2]), 2)?;
        weighted_sum(g, y, 8)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn maxpool_examples_and_oracle() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_vec(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.maxpool2d(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let t = random(&[1, 8, 8, 3], 11);
    let x = g.leaf(t.clone());
    let y = g.maxpool2d(x, 2).unwrap();
    for oy in 0..4 {
        for ox in 0..4 {
            for c in 0..3 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(t.data()[((2 * oy + dy) * 8 + 2 * ox + dx) * 3 + c]);
                    }
                }
                assert_eq!(g.value(y).data()[(oy * 4 + ox) * 3 + c], m);
            }
        }
    }
}

#[test]
fn maxpool_ties_route_to_first_element() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full(&[1, 4, 4, 1], 2.0).unwrap());
    let y = g.maxpool2d(x, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap();
    for r in 0..4 {
        for c in 0..4 {
            let expect = if r % 2 == 0 && c % 2 == 0 { 1.0 } else { 0.0 };
            assert_eq!(grad[r * 4 + c], expect, "({r},{c})");
        }
    }
}

#[test]
fn maxpool_odd_input_asks_for_padding() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[1, 5, 4, 1]).unwrap());
    assert!(matches!(g.maxpool2d(x, 2), Err(Error::PaddingRequired { .. })));
}

#[test]
fn maxpool_gradients() {
    let r = check_fn(&[random(&[2, 4, 6, 2], 12)], &CheckConfig::default(), |g, v| {
        let y = g.maxpool2d(v[0], 2)?;
        weighted_sum(g, y, 13)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn channel_pooling_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 5.0, 3.0]).unwrap());
    let m = g.channel_max(x).unwrap();
    let a = g.channel_avg(x).unwrap();
    assert_eq!(g.value(m).data(), &[5.0]);
    assert_eq!(g.value(a).data(), &[3.0]);

    let single = g.leaf(random(&[1, 3, 3, 1], 14));
    let m = g.channel_max(single).unwrap();
    let a = g.channel_avg(single).unwrap();
    assert_eq!(g.value(m), g.value(single));
    assert_eq!(g.value(a), g.value(single));
}

#[test]
fn channel_pooling_matches_loops() {
    let t = random(&[2, 4, 4, 8], 15);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t.clone());
    let m = g.channel_max(x).unwrap();
    let a = g.channel_avg(x).unwrap();
    assert_eq!(g.shape(m), &[2, 4, 4, 1]);
    for (p, px) in t.data().chunks(8).enumerate() {
        let max = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let avg = px.iter().sum::<f64>() / 8.0;
        assert_eq!(g.value(m).data()[p], max);
        assert!((g.value(a).data()[p] - avg).abs() < 1e-15);
    }
}

#[test]
fn channel_pooling_gradients() {
    let x = random(&[1, 3, 4, 5], 16);
    let r = check_fn(std::slice::from_ref(&x), &CheckConfig::default(), |g, v| {
        let y = g.channel_max(v[0])?;
        weighted_sum(g, y, 17)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    let r = check_fn(&[x], &CheckConfig::default(), |g, v| {
        let y = g.channel_avg(v[0])?;
        weighted_sum(g, y, 18)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn concat_and_slice_round_trip() {
    let (a, b) = (random(&[2, 3, 3, 1], 19), random(&[2, 3, 3, 2], 20));
    let mut g = Graph::<f64>::new();
    let (av, bv) = (g.leaf(a.clone()), g.leaf(b.clone()));
    let c = g.concat_channels(av, bv).unwrap();
    assert_eq!(g.shape(c), &[2, 3, 3, 3]);
    assert_eq!(g.value(c).data()[0], a.data()[0]);
    assert_eq!(g.value(c).data()[1], b.data()[0]);
    let a2 = g.slice_channels(c, 0, 1).unwrap();
    let b2 = g.slice_channels(c, 1, 3).unwrap();
    assert_eq!(g.value(a2), &a);
    assert_eq!(g.value(b2), &b);

    let wrong = g.leaf(random(&[2, 3, 4, 1], 21));
    assert!(g.concat_channels(av, wrong).is_err());
}

#[test]
fn concat_gradients_split_by_channel() {
    let r = check_fn(
        &[random(&[1, 3, 3, 2], 22), random(&[1, 3, 3, 3], 23)],
        &CheckConfig::default(),
        |g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            weighted_sum(g, y, 24)
        },
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn batch_norm_examples() {
    // two channels, each exactly zero-mean and unit (biased) variance
    let data: Vec<f64> = [1.0f64, -1.0, 1.0, -1.0]
        .iter()
        .flat_map(|&v| [v, 2.0 * v.max(0.0) - 1.0])
        .collect();
    let x = Tensor::from_vec(&[1, 2, 2, 2], data.clone()).unwrap();
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x);
    let one = g.leaf(Tensor::ones(&[2]).unwrap());
    let zero = g.leaf(Tensor::zeros(&[2]).unwrap());
    let eps = 1e-5;
    let (y, stats) = g.batch_norm_train(xv, one, zero, eps).unwrap();
    let factor = (1.0f64 / (1.0 + eps)).sqrt();
    assert_close(
        g.value(y).data(),
        &data.iter().map(|v| v * factor).collect::<Vec<_>>(),
        1e-14,
    );
    assert_eq!(stats.mean, vec![0.0, 0.0]);
    assert_eq!(stats.var, vec![1.0, 1.0]);
    assert_eq!(stats.count, 4);

    let gamma0 = g.leaf(Tensor::zeros(&[2]).unwrap());
    let beta = g.leaf(Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap());
    let (y, _) = g.batch_norm_train(xv, gamma0, beta, eps).unwrap();
    for px in g.value(y).data().chunks(2) {
        assert_eq!(px, &[0.5, -2.0]);
    }

    let rm = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
    let rv = Tensor::from_vec(&[2], vec![4.0, 0.25]).unwrap();
    let y = g.batch_norm_eval(xv, one, zero, rm.data(), rv.data(), 0.0).unwrap();
    assert!((g.value(y).data()[0] - 0.0).abs() < 1e-15);
    assert!((g.value(y).data()[1] - (1.0 + 1.0) / 0.5).abs() < 1e-15);
}

#[test]
fn batch_norm_gradients() {
    let r = check_fn(
        &[random(&[2, 3, 3, 4], 25), random(&[4], 26), random(&[4], 27)],
        &CheckConfig::default(),
        |g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, 28)
        },
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn elementwise_gradients() {
    let cfg = CheckConfig::default();
    let (a, b) = (random(&[1, 4, 4, 3], 29), random(&[1, 4, 4, 3], 30));
    let m = random(&[1, 4, 4, 1], 31);
    let checks: Vec<(&str, rsan::check::CheckReport)> = vec![
        (
            "relu",
            check_fn(std::slice::from_ref(&a), &cfg, |g, v| {
                let y = g.relu(v[0])?;
                weighted_sum(g, y, 32)
            })
            .unwrap(),
        ),
        (
            "sigmoid",
            check_fn(std::slice::from_ref(&a), &cfg, |g, v| {
                let y = g.sigmoid(v[0])?;
                weighted_sum(g, y, 33)
            })
            .unwrap(),
        ),
        (
            "add",
            check_fn(&[a.clone(), b.clone()], &cfg, |g, v| {
                let y = g.add(v[0], v[1])?;
                weighted_sum(g, y, 34)
            })
            .unwrap(),
        ),
        (
            "mul",
            check_fn(&[a.clone(), b.clone()], &cfg, |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted_sum(g, y, 35)
            })
            .unwrap(),
        ),
        (
            "mul_broadcast",
            check_fn(&[a.clone(), m], &cfg, |g, v| {
                let y = g.mul_broadcast(v[0], v[1])?;
                weighted_sum(g, y, 36)
            })
            .unwrap(),
        ),
        (
            "scale_mean",
            check_fn(std::slice::from_ref(&a), &cfg, |g, v| {
                let y = g.scale(v[0], -1.5)?;
                let y = g.mul(y, v[0])?;
                g.mean(y)
            })
            .unwrap(),
        ),
        (
            "spatial_mask",
            check_fn(&[a], &cfg, |g, v| {
                let mask = (0..16).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();
                let y = g.spatial_mask(v[0], mask)?;
                weighted_sum(g, y, 37)
            })
            .unwrap(),
        ),
    ];
    for (name, r) in checks {
        assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
    }
}

#[test]
fn bce_value_and_gradient() {
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Tensor::full(&[1, 2, 2, 1], 0.5).unwrap());
    let t = Tensor::from_vec(&[1, 2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let l = g.bce(p, &t, 1e-7).unwrap();
    assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

    let exact = g.leaf(t.clone());
    let l = g.bce(exact, &t, 1e-7).unwrap();
    assert!(g.value(l).data()[0] < 1e-6);

    // random case against a per-pixel loop
    let probs = random(&[1, 4, 4, 1], 38).map(|v| 0.5 + 0.45 * v);
    let target = random(&[1, 4, 4, 1], 39).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let pv = g.leaf(probs.clone());
    let l = g.bce(pv, &target, 1e-7).unwrap();
    let oracle: f64 = probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
        .sum::<f64>()
        / 16.0;
    assert!((g.value(l).data()[0] - oracle).abs() < 1e-6);

    let t9 = Tensor::from_vec(&[1, 3, 3, 1], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let r = check_fn(&[random(&[1, 3, 3, 1], 40)], &CheckConfig::default(), |g, v| {
        let p = g.sigmoid(v[0])?;
        g.bce(p, &t9, 1e-7)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn bce_rejects_bad_input() {
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Tensor::full(&[1, 2, 2, 1], 0.5).unwrap());
    assert!(g.bce(p, &Tensor::full(&[1, 2, 2, 1], 0.3).unwrap(), 1e-7).is_err());
    assert!(g.bce(p, &Tensor::zeros(&[1, 2, 1, 1]).unwrap(), 1e-7).is_err());
}

#[test]
fn forward_ops_are_pure() {
    let x = random(&[1, 8, 8, 4], 41);
    let k = random(&[3, 3, 4, 2], 42);
    let run = || {
        let mut g = Graph::<f64>::new();
        let (xv, kv) = (g.leaf(x.clone()), g.leaf(k.clone()));
        let y = g.conv2d(xv, kv, None, 1, Padding::Same).unwrap();
        let y = g.maxpool2d(y, 2).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn using_a_tensor_twice_doubles_its_gradient() {
    let x = random(&[1, 4, 4, 2], 43);
    let k = random(&[3, 3, 2, 2], 44);
    let grad = |twice: bool| {
        let mut g = Graph::<f64>::new();
        let xv = g.param(x.clone());
        let kv = g.leaf(k.clone());
        let y = g.conv2d(xv, kv, None, 1, Padding::Same).unwrap();
        let y = if twice {
            let y2 = g.conv2d(xv, kv, None, 1, Padding::Same).unwrap();
            g.add(y, y2).unwrap()
        } else {
            y
        };
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        g.grad(xv).unwrap().to_vec()
    };
    let once = grad(false);
    let twice = grad(true);
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn sigmoid_stays_open_in_single_precision() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::from_vec(&[5], vec![-200.0, -30.0, 0.0, 30.0, 200.0]).unwrap());
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y).data()[2], 0.5);
    assert!(g.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
}
