//! Training objectives.
//!
//! * supervised: mean squared error between reflectance and ground truth;
//! * unsupervised: illumination fidelity to the input plus an edge-aware
//!   weighted ℓ1 smoothness over 4-connected neighbours, with weights taken
//!   from the input in YUV;
//! * adaptive denoising: per-group reconstruction error summed over a noisy
//!   group and a clean group.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// BT.601 full-range RGB → YUV, chroma centered at zero.
pub const YUV_FROM_RGB: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_736, -0.331_264, 0.5],
    [0.5, -0.418_688, -0.081_312],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessContext {
    /// Fidelity weight.
    pub lambda: f64,
    /// Gaussian bandwidth of the edge weights.
    pub sigma: f64,
}

impl Default for SmoothnessContext {
    fn default() -> Self {
        SmoothnessContext {
            lambda: 0.2,
            sigma: 0.1,
        }
    }
}

pub fn rgb_to_yuv<S: Scalar>(img: &Tensor<S>) -> Result<Tensor<S>> {
    let [n, c, h, w] = img.dims4("rgb_to_yuv")?;
    if c != 3 {
        return Err(Error::dim("rgb_to_yuv", "channel axis (1) must be 3"));
    }
    let hw = h * w;
    let d = img.data();
    let mut out = alloc::vec![S::zero(); d.len()];
    for s in 0..n {
        let base = s * 3 * hw;
        for k in 0..hw {
            let rgb = [d[base + k], d[base + hw + k], d[base + 2 * hw + k]];
            for (row, coef) in YUV_FROM_RGB.iter().enumerate() {
                out[base + row * hw + k] = rgb
                    .iter()
                    .zip(coef)
                    .map(|(&v, &cf)| v * S::lit(cf))
                    .sum();
            }
        }
    }
    Tensor::new([n, 3, h, w], out)
}

/// Edge weights `w_ij = exp(−Σ_c (y_i,c − y_j,c)² / 2σ²)` over YUV channels,
/// for horizontal (`[N,H,W−1]`) and vertical (`[N,H−1,W]`) neighbour pairs.
pub fn smoothness_weights<S: Scalar>(y: &Tensor<S>, sigma: f64) -> Result<(Tensor<S>, Tensor<S>)> {
    let yuv = rgb_to_yuv(y)?;
    let [n, _, h, w] = yuv.dims4("smoothness_weights")?;
    let d = yuv.data();
    let hw = h * w;
    let denom = S::lit(2.0 * sigma * sigma);
    let weight = |s: usize, i: usize, j: usize| -> S {
        let mut acc = S::zero();
        for c in 0..3 {
            let base = (s * 3 + c) * hw;
            let diff = d[base + i] - d[base + j];
            acc = acc + diff * diff;
        }
        (-acc / denom).exp()
    };
    let mut wh = alloc::vec::Vec::with_capacity(n * h * w.saturating_sub(1));
    let mut wv = alloc::vec::Vec::with_capacity(n * h.saturating_sub(1) * w);
    for s in 0..n {
        for r in 0..h {
            for q in 0..w.saturating_sub(1) {
                wh.push(weight(s, r * w + q, r * w + q + 1));
            }
        }
        for r in 0..h.saturating_sub(1) {
            for q in 0..w {
                wv.push(weight(s, r * w + q, (r + 1) * w + q));
            }
        }
    }
    Ok((
        Tensor::new([n, h, w.saturating_sub(1)], wh)?,
        Tensor::new([n, h.saturating_sub(1), w], wv)?,
    ))
}

/// Mean squared error between reflectance and ground truth.
pub fn supervised_loss<S: Scalar>(g: &mut Graph<S>, z: Var, gt: &Tensor<S>) -> Result<Var> {
    let target = g.input(gt.clone());
    g.mse(z, target)
}

/// `λ·mean((x − y)²) + (1/P)·Σ_i Σ_{j∈N(i)} w_ij |x_i − x_j|`, summed over
/// the illumination channels, with `P = N·H·W` pixels.
pub fn unsupervised_loss<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    y: Var,
    ctx: &SmoothnessContext,
) -> Result<Var> {
    let [n, _, h, w] = g.value(x).dims4("unsupervised_loss")?;
    g.value(x).same_shape(g.value(y), "unsupervised_loss")?;
    let (wh, wv) = smoothness_weights(g.value(y), ctx.sigma)?;
    let fidelity = g.mse(x, y)?;
    let fidelity = g.scale(fidelity, S::lit(ctx.lambda));
    // every unordered neighbour pair appears in both N(i) and N(j)
    let smooth = g.weighted_abs_diff(x, wh, wv, S::lit(2.0 / (n * h * w) as f64))?;
    g.add(fidelity, smooth)
}

/// Sum of per-group MSE over the noisy group `a` and the clean group `b`;
/// an absent group contributes nothing.
pub fn adaptive_denoise_loss<S: Scalar>(
    g: &mut Graph<S>,
    a: Option<(Var, &Tensor<S>)>,
    b: Option<(Var, &Tensor<S>)>,
) -> Result<Var> {
    let mut terms = alloc::vec::Vec::with_capacity(2);
    for (z_hat, gt) in a.into_iter().chain(b) {
        terms.push(supervised_loss(g, z_hat, gt)?);
    }
    match terms.as_slice() {
        [] => Err(Error::Config("adaptive_denoise_loss: both groups are empty".into())),
        [one] => Ok(*one),
        [l, r] => g.add(*l, *r),
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(n: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn([n, 3, h, w], f)
    }

    #[test]
    fn supervised_examples() {
        let mut g = Graph::new();
        let gt = img(1, 2, 2, |i| i as f64 / 12.0);
        let z = g.input(gt.clone());
        let l = supervised_loss(&mut g, z, &gt).unwrap();
        assert_eq!(g.value(l).item(), Some(0.0));
        let shifted = g.input(gt.map(|v| v + 1.0));
        let l = supervised_loss(&mut g, shifted, &gt).unwrap();
        assert!((g.value(l).item().unwrap() - 1.0).abs() < 1e-12);
        let short = Tensor::zeros([1, 3, 2, 1]);
        assert!(supervised_loss(&mut g, z, &short).is_err());
    }

    #[test]
    fn yuv_reference_colours() {
        let px = |r: f64, gg: f64, b: f64| {
            let t = Tensor::new([1, 3, 1, 1], alloc::vec![r, gg, b]).unwrap();
            rgb_to_yuv(&t).unwrap().into_data()
        };
        assert_eq!(px(0.0, 0.0, 0.0), alloc::vec![0.0, 0.0, 0.0]);
        let white = px(1.0, 1.0, 1.0);
        assert!((white[0] - 1.0).abs() < 1e-12);
        assert!(white[1].abs() < 1e-12 && white[2].abs() < 1e-12);
        assert!((px(1.0, 0.0, 0.0)[0] - 0.299).abs() < 1e-15);
    }

    #[test]
    fn unsupervised_zero_on_constant() {
        let mut g = Graph::new();
        let c = img(1, 3, 3, |_| 0.4);
        let x = g.input(c.clone());
        let y = g.input(c);
        let l = unsupervised_loss(&mut g, x, y, &SmoothnessContext::default()).unwrap();
        assert_eq!(g.value(l).item(), Some(0.0));
    }

    #[test]
    fn unsupervised_positive_smoothness_when_x_equals_textured_y() {
        let mut g = Graph::new();
        let t = img(1, 3, 3, |i| (i % 4) as f64 / 4.0);
        let x = g.input(t.clone());
        let y = g.input(t);
        let l = unsupervised_loss(&mut g, x, y, &SmoothnessContext::default()).unwrap();
        assert!(g.value(l).item().unwrap() > 0.0);
    }

    #[test]
    fn weights_in_unit_interval_and_one_on_flat() {
        let flat = img(1, 4, 4, |_| 0.3);
        let (wh, wv) = smoothness_weights(&flat, 0.1).unwrap();
        assert!(wh.data().iter().chain(wv.data()).all(|&w| w == 1.0));
        let tex = img(2, 4, 4, |i| ((i * 13) % 7) as f64 / 7.0);
        let (wh, wv) = smoothness_weights(&tex, 0.1).unwrap();
        assert!(wh.data().iter().chain(wv.data()).all(|&w| w > 0.0 && w <= 1.0));
    }

    #[test]
    fn denoise_loss_groups() {
        let mut g = Graph::new();
        let gt = img(1, 2, 2, |i| i as f64 / 12.0);
        let za = g.input(gt.map(|v| v + 0.1f64.sqrt()));
        let zb = g.input(gt.map(|v| v + 0.3f64.sqrt()));
        let l = adaptive_denoise_loss(&mut g, Some((za, &gt)), Some((zb, &gt))).unwrap();
        assert!((g.value(l).item().unwrap() - 0.4).abs() < 1e-12);
        let only_a = adaptive_denoise_loss(&mut g, Some((za, &gt)), None).unwrap();
        assert!((g.value(only_a).item().unwrap() - 0.1).abs() < 1e-12);
        let perfect = g.input(gt.clone());
        let l = adaptive_denoise_loss(&mut g, Some((perfect, &gt)), Some((perfect, &gt))).unwrap();
        assert_eq!(g.value(l).item(), Some(0.0));
        assert!(adaptive_denoise_loss::<f64>(&mut g, None, None).is_err());
    }
}
