use std::collections::HashMap;

use bladapt_core::metrics::{de_entropy, loe, psnr, ssim, MetricReport, MetricRow};
use bladapt_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn luma(t: &Tensor<f64>) -> Vec<f64> {
    let hw = t.shape()[1] * t.shape()[2];
    let d = t.data();
    (0..hw).map(|i| 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i]).collect()
}

fn psnr_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a.data()[i] - b.data()[i]).powi(2);
    }
    10.0 * (1.0 / (se / a.len() as f64)).log10()
}

/// Single-pass moments over a directly normalized 2-D Gaussian window.
fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let mut k = 11.min(h).min(w);
    if k % 2 == 0 {
        k -= 1;
    }
    let c = (k as f64 - 1.0) / 2.0;
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            win[i * k + j] = (-d2 / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let z: f64 = win.iter().sum();
    let (la, lb) = (luma(a), luma(b));
    let (c1, c2) = (0.0001, 0.0009);
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=h - k {
        for q in 0..=w - k {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = win[i * k + j] / z;
                    let (x, y) = (la[(r + i) * w + q + j], lb[(r + i) * w + q + j]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let (va, vb, cab) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += (2.0 * ma * mb + c1) * (2.0 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn de_oracle(t: &Tensor<f64>) -> f64 {
    let mut counts: HashMap<i64, usize> = HashMap::new();
    let l = luma(t);
    for v in &l {
        *counts.entry((v.clamp(0.0, 1.0) * 255.0).round() as i64).or_default() += 1;
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / l.len() as f64;
            -p * p.log2()
        })
        .sum()
}

fn loe_oracle(e: &Tensor<f64>, o: &Tensor<f64>) -> f64 {
    let hw = e.shape()[1] * e.shape()[2];
    let light = |t: &Tensor<f64>| -> Vec<f64> { (0..hw).map(|i| t.data()[i].max(t.data()[hw + i]).max(t.data()[2 * hw + i])).collect() };
    let (le, lo) = (light(e), light(o));
    let mut bad = 0;
    for i in 0..hw {
        for j in 0..hw {
            let before = lo[i] >= lo[j];
            let after = le[i] >= le[j];
            if before ^ after {
                bad += 1;
            }
        }
    }
    1000.0 * bad as f64 / (hw * hw) as f64
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn([3, h, w], |_| rng.random_range(0.0..1.0))
}

#[test]
fn metrics_match_scalar_oracles_on_small_random_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let a = random_image(&mut rng, h, w);
        let b = random_image(&mut rng, h, w);
        assert!((psnr(&a, &b, 1.0).unwrap() - psnr_oracle(&a, &b)).abs() <= 1e-6);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() <= 1e-6);
        assert!((de_entropy(&a).unwrap() - de_oracle(&a)).abs() <= 1e-6);
        assert!((loe(&a, &b).unwrap() - loe_oracle(&a, &b)).abs() <= 1e-6);
    }
}

#[test]
fn ssim_matches_oracle_at_full_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (h, w) in [(11, 11), (12, 16), (16, 13)] {
        let a = random_image(&mut rng, h, w);
        let b = a.map(|v| (v * 0.8 + 0.05).min(1.0));
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() <= 1e-6);
    }
}

#[test]
fn closed_form_cases() {
    let a = Tensor::from_fn([3, 4, 4], |i| (i % 7) as f64 / 10.0);
    assert!((psnr(&a, &a.map(|v| v + 0.1), 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    assert_eq!(loe(&a, &a).unwrap(), 0.0);
    assert_eq!(de_entropy(&Tensor::full([3, 4, 4], 0.4)).unwrap(), 0.0);
    let halves = Tensor::from_fn([3, 2, 4], |i| if i % 8 < 4 { 0.0 } else { 1.0 });
    assert_eq!(de_entropy(&halves).unwrap(), 1.0);
    let ramp = Tensor::from_fn([3, 16, 16], |i| (i % 256) as f64 / 255.0);
    assert_eq!(de_entropy(&ramp).unwrap(), 8.0);
}

#[test]
fn inverted_distinct_image_flips_every_strict_pair() {
    let orig = Tensor::from_fn([3, 4, 4], |i| ((i % 16) as f64 + 1.0) / 20.0);
    let inv = orig.map(|v| 1.0 - v);
    let p = 16.0;
    assert!((loe(&inv, &orig).unwrap() - 1000.0 * (p * p - p) / (p * p)).abs() < 1e-9);
}

#[test]
fn loe_downsamples_large_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grey: Vec<f64> = (0..6000).map(|_| rng.random_range(0.0..1.0)).collect();
    let a = Tensor::from_fn([3, 100, 60], |i| grey[i % 6000]);
    let b = a.map(|v| v * v);
    assert_eq!(loe(&b, &a).unwrap(), 0.0);
    assert!(loe(&a.map(|v| 1.0 - v), &a).unwrap() > 900.0);
}

#[test]
fn report_rows_follow_pairing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (e, low, gt) = (random_image(&mut rng, 12, 12), random_image(&mut rng, 12, 12), random_image(&mut rng, 12, 12));
    let paired = MetricRow::compute("p", &e, &low, Some(&gt)).unwrap();
    let unpaired = MetricRow::compute("u", &e, &low, None).unwrap();
    assert!(paired.psnr.is_finite() && unpaired.psnr.is_nan() && unpaired.ssim.is_nan());
    assert_eq!(paired.loe, unpaired.loe);
    let csv = MetricReport { rows: vec![paired, unpaired] }.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,psnr,ssim,de,loe");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("mean,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_metrics(seed in any::<u64>(), h in 1usize..14, w in 1usize..14) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, h, w);
        let b = random_image(&mut rng, h, w);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn entropy_ignores_pixel_order(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, h, w);
        let hw = h * w;
        let mut order: Vec<usize> = (0..hw).collect();
        for i in (1..hw).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let shuffled = Tensor::from_fn([3, h, w], |i| a.data()[(i / hw) * hw + order[i % hw]]);
        prop_assert!((de_entropy(&a).unwrap() - de_entropy(&shuffled).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn loe_ignores_increasing_remaps(seed in any::<u64>(), h in 1usize..10, w in 1usize..10, gamma in 0.2f64..5.0, gain in 0.1f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let orig = random_image(&mut rng, h, w);
        let enhanced = random_image(&mut rng, h, w);
        let remapped = enhanced.map(|v| gain * v.powf(gamma));
        prop_assert_eq!(loe(&enhanced, &orig).unwrap(), loe(&remapped, &orig).unwrap());
    }
}
