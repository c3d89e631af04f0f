//! Image quality metrics: PSNR and SSIM (full reference), discrete entropy
//! and lightness-order error (no reference).
//!
//! Images are `[3,H,W]`, `[1,3,H,W]` (RGB) or `[H,W]`, `[1,H,W]` (single
//! channel), values nominally in `[0,1]`. Everything is accumulated in f64.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const LOE_MAX_SIDE: usize = 50;
pub const LOE_SCALE: f64 = 1000.0;

/// A planar image view in f64: `channels` planes of `h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Planes {
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>, op: &'static str) -> Result<Self> {
        let (channels, h, w) = match *t.shape() {
            [h, w] => (1, h, w),
            [c, h, w] | [1, c, h, w] => (c, h, w),
            _ => return Err(Error::dim(op, format!("expected an image tensor, got shape {:?}", t.shape()))),
        };
        if channels != 1 && channels != 3 {
            return Err(Error::dim(op, format!("channel axis must be 1 or 3, got {}", channels)));
        }
        Ok(Planes {
            channels,
            h,
            w,
            data: t.data().iter().map(|v| v.as_f64()).collect(),
        })
    }

    fn plane(&self, c: usize) -> &[f64] {
        let hw = self.h * self.w;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Per-pixel luma (identity for a single channel).
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        (0..self.h * self.w)
            .map(|i| LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i])
            .collect()
    }

    /// Per-pixel maximum over channels.
    pub fn lightness(&self) -> Vec<f64> {
        let hw = self.h * self.w;
        (0..hw)
            .map(|i| (0..self.channels).map(|c| self.data[c * hw + i]).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

fn pair<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, op: &'static str) -> Result<(Planes, Planes)> {
    let pa = Planes::from_tensor(a, op)?;
    let pb = Planes::from_tensor(b, op)?;
    if (pa.channels, pa.h, pa.w) != (pb.channels, pb.h, pb.w) {
        return Err(Error::mismatch(op, a.shape(), b.shape()));
    }
    Ok((pa, pb))
}

/// `10·log10(peak² / MSE)`; `+∞` when the images are identical.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch("psnr", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::dim("psnr", "empty image"));
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Side of the SSIM window for an `h × w` image: 11, or the largest odd
/// side that fits a smaller image.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let k = SSIM_WINDOW.min(h).min(w);
    if k.is_multiple_of(2) {
        k.saturating_sub(1)
    } else {
        k
    }
}

/// Mean local SSIM of the luminance over all fully contained Gaussian
/// windows (see [`ssim_window`]).
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    let (pa, pb) = pair(a, b, "ssim")?;
    let k = ssim_window(pa.h, pa.w);
    if k == 0 {
        return Err(Error::dim("ssim", "empty image"));
    }
    let (la, lb) = (pa.luminance(), pb.luminance());
    let taps = gaussian_taps(k, SSIM_SIGMA);
    let w = pa.w;
    let (oh, ow) = (pa.h - k + 1, pa.w - k + 1);
    let mut total = 0.0;
    for r in 0..oh {
        for c in 0..ow {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = taps[i] * taps[j];
                    let idx = (r + i) * w + c + j;
                    ma += wt * la[idx];
                    mb += wt * lb[idx];
                }
            }
            let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = taps[i] * taps[j];
                    let idx = (r + i) * w + c + j;
                    let (da, db) = (la[idx] - ma, lb[idx] - mb);
                    va += wt * da * da;
                    vb += wt * db * db;
                    cab += wt * da * db;
                }
            }
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// 8-bit quantization used by the entropy histogram.
pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Shannon entropy (bits) of the 256-bin histogram of quantized luminance.
pub fn de_entropy<S: Scalar>(img: &Tensor<S>) -> Result<f64> {
    let p = Planes::from_tensor(img, "de_entropy")?;
    let lum = p.luminance();
    if lum.is_empty() {
        return Err(Error::dim("de_entropy", "empty image"));
    }
    let mut hist = [0usize; 256];
    for &v in &lum {
        hist[quantize8(v) as usize] += 1;
    }
    let n = lum.len() as f64;
    Ok(hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / n;
            -q * q.log2()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Nearest-neighbour resampling indices to at most `cap` samples.
pub fn nearest_indices(n: usize, cap: usize) -> Vec<usize> {
    let m = n.min(cap);
    (0..m).map(|i| i * n / m).collect()
}

/// Lightness-order error ×1000. Lightness is the channel maximum, both
/// images are resampled to at most 50×50, and ties count as ordered.
pub fn loe<S: Scalar>(enhanced: &Tensor<S>, original: &Tensor<S>) -> Result<f64> {
    let (pe, po) = pair(enhanced, original, "loe")?;
    if pe.h == 0 || pe.w == 0 {
        return Err(Error::dim("loe", "empty image"));
    }
    let (le, lo) = (pe.lightness(), po.lightness());
    let rows = nearest_indices(pe.h, LOE_MAX_SIDE);
    let cols = nearest_indices(pe.w, LOE_MAX_SIDE);
    let mut se = Vec::with_capacity(rows.len() * cols.len());
    let mut so = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            se.push(le[r * pe.w + c]);
            so.push(lo[r * pe.w + c]);
        }
    }
    let p = se.len();
    let mut flips: u64 = 0;
    for i in 0..p {
        for j in 0..p {
            if (so[i] >= so[j]) != (se[i] >= se[j]) {
                flips += 1;
            }
        }
    }
    Ok(LOE_SCALE * flips as f64 / (p * p) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub de: f64,
    pub loe: f64,
}

impl MetricRow {
    /// All four metrics for an enhanced image against its low-light input
    /// and optional ground truth. Without ground truth PSNR/SSIM are NaN.
    pub fn compute<S: Scalar>(id: &str, enhanced: &Tensor<S>, low: &Tensor<S>, gt: Option<&Tensor<S>>) -> Result<Self> {
        let (psnr_v, ssim_v) = match gt {
            Some(gt) => (psnr(enhanced, gt, 1.0)?, ssim(enhanced, gt)?),
            None => (f64::NAN, f64::NAN),
        };
        Ok(MetricRow {
            id: String::from(id),
            psnr: psnr_v,
            ssim: ssim_v,
            de: de_entropy(enhanced)?,
            loe: loe(enhanced, low)?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

fn mean_of(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn fmt_metric(out: &mut String, v: f64) {
    if v.is_nan() {
        out.push_str("nan");
    } else if v.is_infinite() {
        out.push_str(if v > 0.0 { "inf" } else { "-inf" });
    } else {
        let _ = write!(out, "{:.6}", v);
    }
}

impl MetricReport {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn mean_psnr(&self) -> f64 {
        mean_of(self.rows.iter().map(|r| r.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean_of(self.rows.iter().map(|r| r.ssim))
    }

    pub fn mean_de(&self) -> f64 {
        mean_of(self.rows.iter().map(|r| r.de))
    }

    pub fn mean_loe(&self) -> f64 {
        mean_of(self.rows.iter().map(|r| r.loe))
    }

    /// `id,psnr,ssim,de,loe`, one row per image and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr,ssim,de,loe\n");
        let mut line = |id: &str, vals: [f64; 4]| {
            out.push_str(id);
            for v in vals {
                out.push(',');
                fmt_metric(&mut out, v);
            }
            out.push('\n');
        };
        for r in &self.rows {
            line(&r.id, [r.psnr, r.ssim, r.de, r.loe]);
        }
        line(
            "mean",
            [self.mean_psnr(), self.mean_ssim(), self.mean_de(), self.mean_loe()],
        );
        out
    }
}

/// Histogram chi-square distance `½ Σ (p−q)² / (p+q)` between two 256-bin
/// luminance histograms pooled over image sets.
pub fn chi_square_distance<S: Scalar>(a: &[&Tensor<S>], b: &[&Tensor<S>]) -> Result<f64> {
    let hist = |set: &[&Tensor<S>]| -> Result<Vec<f64>> {
        let mut h = vec![0.0; 256];
        let mut n = 0.0;
        for t in set {
            for v in Planes::from_tensor(t, "chi_square_distance")?.luminance() {
                h[quantize8(v) as usize] += 1.0;
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Err(Error::dim("chi_square_distance", "empty image set"));
        }
        Ok(h.into_iter().map(|c| c / n).collect())
    };
    let (p, q) = (hist(a)?, hist(b)?);
    Ok(0.5
        * p.iter()
            .zip(&q)
            .filter(|(x, y)| **x + **y > 0.0)
            .map(|(x, y)| (x - y) * (x - y) / (x + y))
            .sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn([3, h, w], f)
    }

    #[test]
    fn psnr_examples() {
        let a = rgb(4, 4, |i| i as f64 / 48.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &rgb(4, 3, |_| 0.0), 1.0).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = rgb(12, 13, |i| ((i * 31) % 17) as f64 / 17.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c0 = Tensor::<f64>::full([1, 11, 11], 0.2);
        let c1 = Tensor::<f64>::full([1, 11, 11], 0.7);
        let expect = (2.0 * 0.2 * 0.7 + SSIM_C1) / (0.2f64 * 0.2 + 0.7 * 0.7 + SSIM_C1);
        assert!((ssim(&c0, &c1).unwrap() - expect).abs() < 1e-12);
        assert!((ssim(&rgb(8, 8, |_| 0.3), &rgb(8, 8, |_| 0.3)).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!((ssim_window(8, 9), ssim_window(40, 12), ssim_window(1, 5)), (7, 11, 1));
        assert!(ssim(&rgb(0, 0, |_| 0.0), &rgb(0, 0, |_| 0.0)).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(de_entropy(&Tensor::<f64>::full([1, 4, 4], 0.3)).unwrap(), 0.0);
        let two = Tensor::<f64>::from_fn([1, 2, 4], |i| if i % 2 == 0 { 0.0 } else { 1.0 });
        assert!((de_entropy(&two).unwrap() - 1.0).abs() < 1e-15);
        let all = Tensor::<f64>::from_fn([16, 16], |i| i as f64 / 255.0);
        assert!((de_entropy(&all).unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn loe_examples() {
        let a = rgb(4, 4, |i| ((i * 7) % 16) as f64 / 16.0);
        assert_eq!(loe(&a, &a).unwrap(), 0.0);
        assert_eq!(loe(&a.map(|v| v * v), &a).unwrap(), 0.0);
        // single channel with 16 distinct values: inversion flips every
        // strictly ordered pair, i.e. all off-diagonal pairs
        let g = Tensor::<f64>::from_fn([4, 4], |i| ((i * 7) % 16) as f64 / 16.0);
        let inv = g.map(|v| 1.0 - v);
        assert!((loe(&inv, &g).unwrap() - 1000.0 * 240.0 / 256.0).abs() < 1e-9);
    }

    #[test]
    fn nearest_indices_cap() {
        assert_eq!(nearest_indices(4, 50), alloc::vec![0, 1, 2, 3]);
        let i = nearest_indices(64, 50);
        assert_eq!(i.len(), 50);
        assert_eq!(i[0], 0);
        assert!(*i.last().unwrap() < 64);
    }

    #[test]
    fn report_csv() {
        let report = MetricReport {
            rows: alloc::vec![
                MetricRow { id: "a".into(), psnr: 20.0, ssim: 0.5, de: 7.0, loe: 100.0 },
                MetricRow { id: "b".into(), psnr: 30.0, ssim: 0.7, de: 6.0, loe: 0.0 },
            ],
        };
        let csv = report.to_csv();
        assert_eq!(
            csv,
            "id,psnr,ssim,de,loe\na,20.000000,0.500000,7.000000,100.000000\nb,30.000000,0.700000,6.000000,0.000000\nmean,25.000000,0.600000,6.500000,50.000000\n"
        );
    }
}
