use bladapt_core::graph::{BnMode, DivGuard};
use bladapt_core::{Graph, ParamSet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Direct cross-correlation, one output element at a time.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let xi = |a: usize, b: usize, c_: usize, d: usize| x.data()[((a * c + b) * h + c_) * wd + d];
    let wi = |a: usize, b: usize, c_: usize, d: usize| w.data()[((a * c + b) * kh + c_) * kw + d];
    let mut out = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            for yo in 0..ho {
                for xo in 0..wo {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let yy = (yo * stride + ky) as isize - pad as isize;
                                let xx = (xo * stride + kx) as isize - pad as isize;
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                                    acc += xi(ni, ci, yy as usize, xx as usize) * wi(oi, ci, ky, kx);
                                }
                            }
                        }
                    }
                    out[((ni * o + oi) * ho + yo) * wo + xo] = acc;
                }
            }
        }
    }
    Tensor::new([n, o, ho, wo], out).unwrap()
}

fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
    g.value(y).clone()
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, rel: f64) {
    assert_eq!(a.shape(), b.shape());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y).abs() <= rel * y.abs().max(1.0), "element {}: {} vs {}", i, x, y);
    }
}

#[test]
fn conv_matches_quadruple_loop_on_seeded_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[1, 2, 5, 5]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    let b = random(&mut rng, &[3]);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        assert_close(&run_conv(&x, &w, &b, stride, pad), &conv_oracle(&x, &w, b.data(), stride, pad), 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_oracle_on_small_shapes(
        n in 1usize..=2, c in 1usize..=4, o in 1usize..=3, h in 5usize..=9, w in 5usize..=9,
        k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..=2, pad in 0usize..=2, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[n, c, h, w]);
        let wt = random(&mut rng, &[o, c, k, k]);
        let b = random(&mut rng, &[o]);
        assert_close(&run_conv(&x, &wt, &b, stride, pad), &conv_oracle(&x, &wt, b.data(), stride, pad), 1e-10);
    }

    #[test]
    fn sigmoid_in_open_unit_interval_and_leaky_monotone(v in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let mut g = Graph::new();
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let x = g.input(Tensor::new([sorted.len()], sorted).unwrap());
        let s = g.sigmoid(x);
        prop_assert!(g.value(s).data().iter().all(|&y| y > 0.0 && y < 1.0));
        let l = g.leaky_relu(x, 0.2).unwrap();
        prop_assert!(g.value(l).data().windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[1, 2, 4, 4]);
        let t = random(&mut rng, &[1, 3, 4, 4]);
        let mut params = ParamSet::new();
        params.insert("w", random(&mut rng, &[3, 2, 3, 3]));
        let grads = |which: u8| {
            let mut g = Graph::new();
            let vars = g.params_from(&params);
            let xv = g.input(x.clone());
            let y = g.conv2d(xv, vars["w"], None, 1, 1).unwrap();
            let tv = g.input(t.clone());
            let l1 = g.mse(y, tv).unwrap();
            let s = g.sigmoid(y);
            let l2 = g.mean(s);
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => g.add(l1, l2).unwrap(),
            };
            g.backward(loss, &["w"]).unwrap()
        };
        let mut sum = grads(1);
        sum.axpy(1.0, &grads(2)).unwrap();
        let both = grads(0);
        for ((_, a), (_, b)) in sum.iter().zip(both.iter()) {
            assert_close(a, b, 1e-12);
        }
    }
}

#[test]
fn batchnorm_statistics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn([4, 3, 6, 5], |_| rng.random_range(-2.0..5.0));
    let mut g = Graph::new();
    let xv = g.input(x);
    let gamma = g.input(Tensor::full([3], 1.0));
    let beta = g.input(Tensor::zeros([3]));
    let y = g.batchnorm2d(xv, gamma, beta, BnMode::Train { eps: 1e-5 }, "bn").unwrap();
    let d = g.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| (0..30).map(move |i| (n, i))).map(|(n, i)| d[(n * 3 + c) * 30 + i]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() <= 1e-6, "channel {} mean {}", c, m);
        assert!((var - 1.0).abs() <= 1e-5, "channel {} var {}", c, var);
    }
    assert_eq!(g.batch_stats()[0].tag, "bn");
}

#[test]
fn weighted_sum_gradient_is_input_and_repeatable() {
    let x = Tensor::new([4], vec![0.5, -1.0, 2.0, 3.5]).unwrap();
    let run = || {
        let mut g = Graph::new();
        let w = g.param("w", &Tensor::new([4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let xv = g.input(x.clone());
        let p = g.mul(w, xv).unwrap();
        let s = g.sum(p);
        g.backward(s, &["w"]).unwrap()
    };
    let a = run();
    assert_eq!(a.get("w").unwrap(), &x);
    assert_eq!(a, run());
}

#[test]
fn pooling_and_upsampling_keep_constants() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full([2, 3, 8, 8], 0.7));
    let p = g.maxpool2d(x, 2).unwrap();
    let u = g.upsample_nearest(p, 2).unwrap();
    assert_eq!(g.value(u), g.value(x));
}

#[test]
fn division_self_and_guard() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::new([3], vec![0.3, 2.0, 5.0]).unwrap());
    let q = g.div(a, a, DivGuard::Strict(1e-4)).unwrap();
    assert_eq!(g.value(q).data(), &[1.0, 1.0, 1.0]);
    let tiny = g.input(Tensor::new([3], vec![1e-6, 1.0, 1.0]).unwrap());
    assert!(g.div(a, tiny, DivGuard::Strict(1e-4)).is_err());
    let c = g.div(a, tiny, DivGuard::Clamp(1e-4)).unwrap();
    assert!((g.value(c).data()[0] - 0.3 / 1e-4).abs() < 1e-9);
}
