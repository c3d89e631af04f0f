//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every primitive in execution order; a [`Var`] is an
//! index into that record, so inputs of node `k` always sit at indices `< k`.
//! The tape is built for one forward evaluation and dropped afterwards.
//! [`Graph::backward`] walks the record once in reverse, touching only nodes
//! that lie between the loss and the requested leaves.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::Tensor;

/// Default floor for guarded division.
pub const DENOM_FLOOR: f64 = 1e-4;
/// Default batchnorm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Default running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation<S> {
    LeakyRelu(S),
    Relu,
    Sigmoid,
}

/// How division treats denominators below the floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DivGuard<S> {
    /// Replace the denominator by `max(b, floor)`.
    Clamp(S),
    /// Fail with a numeric-guard error if any `|b| < floor`.
    Strict(S),
}

/// Normalization source for [`Graph::batchnorm2d`].
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, S> {
    /// Batch statistics; the observed statistics are recorded on the graph.
    Train { eps: S },
    /// Fixed running statistics.
    Eval {
        mean: &'a [S],
        var: &'a [S],
        eps: S,
    },
}

/// Per-channel statistics observed by a train-mode batchnorm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<S> {
    pub tag: String,
    pub mean: Vec<S>,
    /// Unbiased variance, the quantity folded into running statistics.
    pub var: Vec<S>,
}

enum Op<S> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<S>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    Act {
        x: Var,
        kind: Activation<S>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div {
        a: Var,
        b: Var,
        floor: Option<S>,
    },
    Concat(Vec<Var>),
    Clamp {
        x: Var,
        lo: S,
        hi: S,
    },
    Scale {
        x: Var,
        c: S,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    WeightedAbsDiff {
        x: Var,
        wh: Tensor<S>,
        wv: Tensor<S>,
        scale: S,
    },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Act { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Upsample { x, .. }
            | Op::Clamp { x, .. }
            | Op::Scale { x, .. }
            | Op::WeightedAbsDiff { x, .. } => vec![*x],
            Op::Sum(x) | Op::Mean(x) => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Div { a, b, .. } => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Act { .. } => "activation",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Upsample { .. } => "upsample_nearest",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div { .. } => "div",
            Op::Concat(..) => "concat",
            Op::Clamp { .. } => "clamp",
            Op::Scale { .. } => "scale",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mse(..) => "mse",
            Op::WeightedAbsDiff { .. } => "weighted_abs_diff",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<String, Var>,
    stats: Vec<BatchStats<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            stats: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        if cfg!(debug_assertions) && !value.is_finite() {
            let inputs_finite = op
                .inputs()
                .iter()
                .all(|v| self.nodes[v.0].value.is_finite());
            debug_assert!(
                !inputs_finite,
                "{} produced a non-finite value from finite inputs",
                op.name()
            );
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf (never differentiated unless explicitly requested).
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A named parameter leaf. Re-registering a name returns the existing leaf.
    pub fn param(&mut self, name: &str, value: &Tensor<S>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Register every tensor of a parameter set.
    pub fn params_from(&mut self, set: &ParamSet<S>) -> BTreeMap<String, Var> {
        set.iter()
            .map(|(name, t)| (name.to_string(), self.param(name, t)))
            .collect()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Statistics observed by train-mode batchnorms, in execution order.
    pub fn batch_stats(&self) -> &[BatchStats<S>] {
        &self.stats
    }

    pub fn take_batch_stats(&mut self) -> Vec<BatchStats<S>> {
        core::mem::take(&mut self.stats)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4("conv2d")?;
        let [o, wc, kh, kw] = self.value(w).dims4("conv2d")?;
        if wc != c {
            return Err(Error::dim(
                "conv2d",
                format!("input channel axis (1) is {} but weight axis 1 is {}", c, wc),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("kernel axes (2,3) must be odd, got {}x{}", kh, kw),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "spatial axes (2,3) {}x{} with padding {} smaller than kernel {}x{}",
                    h, wd, pad, kh, kw
                ),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias axis 0 must be {}, got {:?}", o, self.shape(b)),
                ));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geo = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let ck = c * kh * kw;
        let p = ho * wo;
        let mut cols = vec![S::zero(); n * ck * p];
        let mut out = vec![S::zero(); n * o * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            let col = &mut cols[i * ck * p..(i + 1) * ck * p];
            im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &geo, col);
            gemm(
                Mat::new(wv, o, ck),
                Mat::new(col, ck, p),
                S::zero(),
                &mut out[i * o * p..(i + 1) * o * p],
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (chunk, &bias) in out.chunks_mut(p).zip(bv.iter().cycle()) {
                for v in chunk {
                    *v = *v + bias;
                }
            }
        }
        let value = Tensor::new([n, o, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        ))
    }

    /// Batch normalization over axes (0, 2, 3). In train mode the observed
    /// statistics are recorded under `tag` (see [`Graph::batch_stats`]).
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, S>,
        tag: &str,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("batchnorm2d")?;
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [c] {
                return Err(Error::dim(
                    "batchnorm2d",
                    format!("{} must have shape [{}], got {:?}", what, c, self.shape(v)),
                ));
            }
        }
        let hw = h * w;
        let m = n * hw;
        let xv = self.value(x).data();
        let (mean, var_b, eps, train) = match mode {
            BnMode::Train { eps } => {
                if m < 2 {
                    return Err(Error::DegenerateBatch {
                        channel: 0,
                        count: m,
                    });
                }
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                let mf = S::lit(m as f64);
                for ch in 0..c {
                    let mut s = S::zero();
                    for i in 0..n {
                        s = s + xv[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                            .iter()
                            .copied()
                            .sum::<S>();
                    }
                    let mu = s / mf;
                    let mut q = S::zero();
                    for i in 0..n {
                        for &v in &xv[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            q = q + (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = q / mf;
                }
                (mean, var, eps, true)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim(
                        "batchnorm2d",
                        format!("running statistics must have {} channels", c),
                    ));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<S> = var_b.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for k in base..base + hw {
                    let xh = (xv[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xh;
                    out[k] = g[ch] * xh + bt[ch];
                }
            }
        }
        if train {
            let unbias = S::lit(m as f64 / (m as f64 - 1.0));
            self.stats.push(BatchStats {
                tag: tag.to_string(),
                mean,
                var: var_b.iter().map(|&v| v * unbias).collect(),
            });
        }
        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation<S>) -> Result<Var> {
        if let Activation::LeakyRelu(a) = kind {
            if !(a > S::zero() && a < S::one()) {
                return Err(Error::Config(format!("leaky_relu slope {} outside (0,1)", a)));
            }
        }
        let value = self.value(x).map(|v| match kind {
            Activation::LeakyRelu(a) => {
                if v > S::zero() {
                    v
                } else {
                    a * v
                }
            }
            Activation::Relu => v.max(S::zero()),
            Activation::Sigmoid => sigmoid(v),
        });
        Ok(self.push(value, Op::Act { x, kind }))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: S) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(alpha))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
            .expect("relu has no preconditions")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
            .expect("sigmoid has no preconditions")
    }

    /// Non-overlapping `k×k` max pooling.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("maxpool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::dim(
                "maxpool2d",
                format!("spatial axes (2,3) {}x{} not divisible by {}", h, w, k),
            ));
        }
        let (ho, wo) = (h / k, w / k);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + i * k * w + j * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (i * k + di) * w + j * k + dj;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("upsample_nearest")?;
        if factor == 0 {
            return Err(Error::dim("upsample_nearest", "factor must be positive"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                let row = base + (i / factor) * w;
                for j in 0..wo {
                    out.push(xv[row + j / factor]);
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        Ok(self.push(value, Op::Upsample { x, factor }))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let va = self.value(a);
        let vb = self.value(b);
        va.zip_map(vb, op, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var, guard: DivGuard<S>) -> Result<Var> {
        let floor = match guard {
            DivGuard::Clamp(f) => Some(f),
            DivGuard::Strict(f) => {
                if let Some(bad) = self.value(b).data().iter().find(|v| v.abs() < f) {
                    return Err(Error::NumericGuard {
                        op: "div",
                        detail: format!("denominator {} below floor {}", bad, f),
                    });
                }
                None
            }
        };
        let v = self.binary(a, b, "div", |x, y| match floor {
            Some(f) => x / y.max(f),
            None => x / y,
        })?;
        Ok(self.push(v, Op::Div { a, b, floor }))
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat", "nothing to concatenate"))?;
        let [n, _, h, w] = self.value(first).dims4("concat")?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4("concat")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::mismatch("concat", self.shape(first), self.shape(p)));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for i in 0..n {
            for (&p, &pc) in parts.iter().zip(&channels) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[i * pc * hw..(i + 1) * pc * hw]);
            }
        }
        let value = Tensor::new([n, total, h, w], out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Clamp to `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Var {
        let value = self.value(x).clamp(lo, hi);
        self.push(value, Op::Clamp { x, lo, hi })
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, Op::Mean(x))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        va.same_shape(vb, "mse")?;
        let n = S::lit(va.len().max(1) as f64);
        let s: S = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b)))
    }

    /// `scale · Σ_{n,c} (Σ wh·|∂ₓx| + Σ wv·|∂ᵧx|)` with forward differences
    /// between 4-connected neighbours. `wh` is `[N,H,W-1]`, `wv` is `[N,H-1,W]`;
    /// both are shared across channels.
    pub fn weighted_abs_diff(
        &mut self,
        x: Var,
        wh: Tensor<S>,
        wv: Tensor<S>,
        scale: S,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("weighted_abs_diff")?;
        if wh.shape() != [n, h, w.saturating_sub(1)] || wv.shape() != [n, h.saturating_sub(1), w] {
            return Err(Error::dim(
                "weighted_abs_diff",
                format!(
                    "weights {:?}/{:?} do not fit input [{}, {}, {}, {}]",
                    wh.shape(),
                    wv.shape(),
                    n,
                    c,
                    h,
                    w
                ),
            ));
        }
        let xv = self.value(x).data();
        let mut s = S::zero();
        for i in 0..n {
            for ch in 0..c {
                let plane = &xv[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                for r in 0..h {
                    for q in 0..w {
                        let v = plane[r * w + q];
                        if q + 1 < w {
                            s = s + wh.data()[(i * h + r) * (w - 1) + q] * (plane[r * w + q + 1] - v).abs();
                        }
                        if r + 1 < h {
                            s = s + wv.data()[(i * (h - 1) + r) * w + q] * (plane[(r + 1) * w + q] - v).abs();
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::scalar(s * scale),
            Op::WeightedAbsDiff { x, wh, wv, scale },
        ))
    }

    // ----------------------------------------------------------- backward

    /// Gradients of the scalar `loss` with respect to the named parameters.
    pub fn backward(&self, loss: Var, wrt: &[&str]) -> Result<ParamSet<S>> {
        let mut targets = Vec::with_capacity(wrt.len());
        for name in wrt {
            let v = self
                .params
                .get(*name)
                .copied()
                .ok_or_else(|| Error::UnknownParameter((*name).to_string()))?;
            targets.push(v);
        }
        let grads = self.backward_vars(loss, &targets)?;
        let mut out = ParamSet::new();
        for (name, g) in wrt.iter().zip(grads) {
            out.insert(name, g);
        }
        Ok(out)
    }

    /// Gradients with respect to every registered parameter.
    pub fn backward_all(&self, loss: Var) -> Result<ParamSet<S>> {
        let names: Vec<&str> = self.params.keys().map(String::as_str).collect();
        self.backward(loss, &names)
    }

    /// Gradients of the scalar `loss` with respect to arbitrary nodes.
    pub fn backward_vars(&self, loss: Var, targets: &[Var]) -> Result<Vec<Tensor<S>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = loss.0 + 1;
        // needs[i]: node i lies on a path from some target to the loss.
        let mut needs = vec![false; n];
        for t in targets {
            if t.0 < n {
                needs[t.0] = true;
            }
        }
        for i in 0..n {
            if !needs[i] && self.nodes[i].op.inputs().iter().any(|v| needs[v.0]) {
                needs[i] = true;
            }
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        let is_target = |i: usize| targets.iter().any(|t| t.0 == i);
        for i in (0..n).rev() {
            if !needs[i] || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = match if is_target(i) {
                grads[i].clone()
            } else {
                grads[i].take()
            } {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &needs, &mut grads);
        }
        Ok(targets
            .iter()
            .map(|t| {
                let shape = self.shape(*t).to_vec();
                let data = match grads.get(t.0).and_then(|g| g.clone()) {
                    Some(d) => d,
                    None => vec![S::zero(); shape.iter().product()],
                };
                Tensor::new(shape, data).expect("gradient matches value shape")
            })
            .collect())
    }

    fn propagate(&self, i: usize, g: &[S], needs: &[bool], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let want = |v: &Var| needs[v.0];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let [n, c, h, wd] = self.nodes[x.0].value.dims4("conv2d").expect("rank 4");
                let [o, _, kh, kw] = self.nodes[w.0].value.dims4("conv2d").expect("rank 4");
                let [_, _, ho, wo] = node.value.dims4("conv2d").expect("rank 4");
                let geo = ConvGeom {
                    c,
                    h,
                    w: wd,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *pad,
                    ho,
                    wo,
                };
                let ck = c * kh * kw;
                let p = ho * wo;
                if let Some(b) = b.filter(|b| want(b)) {
                    let mut db = vec![S::zero(); o];
                    for (k, chunk) in g.chunks(p).enumerate() {
                        db[k % o] = db[k % o] + chunk.iter().copied().sum::<S>();
                    }
                    accumulate(grads, b, db);
                }
                if want(w) {
                    let mut dw = vec![S::zero(); o * ck];
                    for s in 0..n {
                        gemm(
                            Mat::new(&g[s * o * p..(s + 1) * o * p], o, p),
                            Mat::new(&cols[s * ck * p..(s + 1) * ck * p], ck, p).t(),
                            S::one(),
                            &mut dw,
                        );
                    }
                    accumulate(grads, *w, dw);
                }
                if want(x) {
                    let wv = self.nodes[w.0].value.data();
                    let mut dx = vec![S::zero(); n * c * h * wd];
                    let mut dcol = vec![S::zero(); ck * p];
                    for s in 0..n {
                        gemm(
                            Mat::new(wv, o, ck).t(),
                            Mat::new(&g[s * o * p..(s + 1) * o * p], o, p),
                            S::zero(),
                            &mut dcol,
                        );
                        col2im(&dcol, &geo, &mut dx[s * c * h * wd..(s + 1) * c * h * wd]);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = node.value.dims4("batchnorm2d").expect("rank 4");
                let hw = h * w;
                let m = S::lit((n * hw) as f64);
                let mut sum_g = vec![S::zero(); c];
                let mut sum_gx = vec![S::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for k in base..base + hw {
                            sum_g[ch] = sum_g[ch] + g[k];
                            sum_gx[ch] = sum_gx[ch] + g[k] * xhat[k];
                        }
                    }
                }
                if want(gamma) {
                    accumulate(grads, *gamma, sum_gx.clone());
                }
                if want(beta) {
                    accumulate(grads, *beta, sum_g.clone());
                }
                if want(x) {
                    let gm = self.nodes[gamma.0].value.data();
                    let mut dx = vec![S::zero(); g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let k0 = gm[ch] * inv_std[ch];
                            for k in base..base + hw {
                                dx[k] = if *train {
                                    k0 * (g[k] - (sum_g[ch] + xhat[k] * sum_gx[ch]) / m)
                                } else {
                                    k0 * g[k]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Act { x, kind } => {
                if want(x) {
                    let xv = self.nodes[x.0].value.data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .zip(out)
                        .map(|((&gi, &xi), &yi)| match kind {
                            Activation::LeakyRelu(a) => {
                                if xi > S::zero() {
                                    gi
                                } else {
                                    gi * *a
                                }
                            }
                            Activation::Relu => {
                                if xi > S::zero() {
                                    gi
                                } else {
                                    S::zero()
                                }
                            }
                            Activation::Sigmoid => gi * yi * (S::one() - yi),
                        })
                        .collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::MaxPool { x, argmax } => {
                if want(x) {
                    let mut dx = vec![S::zero(); self.nodes[x.0].value.len()];
                    for (&gi, &idx) in g.iter().zip(argmax) {
                        dx[idx as usize] = dx[idx as usize] + gi;
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Upsample { x, factor } => {
                if want(x) {
                    let [n, c, h, w] = self.nodes[x.0].value.dims4("upsample").expect("rank 4");
                    let (ho, wo) = (h * factor, w * factor);
                    let mut dx = vec![S::zero(); n * c * h * w];
                    for plane in 0..n * c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let d = plane * h * w + (i / factor) * w + j / factor;
                                dx[d] = dx[d] + g[plane * ho * wo + i * wo + j];
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if want(b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if want(b) {
                    accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let va = self.nodes[a.0].value.data();
                let vb = self.nodes[b.0].value.data();
                if want(a) {
                    accumulate(grads, *a, g.iter().zip(vb).map(|(&gi, &bi)| gi * bi).collect());
                }
                if want(b) {
                    accumulate(grads, *b, g.iter().zip(va).map(|(&gi, &ai)| gi * ai).collect());
                }
            }
            Op::Div { a, b, floor } => {
                let va = self.nodes[a.0].value.data();
                let vb = self.nodes[b.0].value.data();
                let den = |bi: S| match floor {
                    Some(f) => bi.max(*f),
                    None => bi,
                };
                if want(a) {
                    accumulate(grads, *a, g.iter().zip(vb).map(|(&gi, &bi)| gi / den(bi)).collect());
                }
                if want(b) {
                    let db = g
                        .iter()
                        .zip(va)
                        .zip(vb)
                        .map(|((&gi, &ai), &bi)| match floor {
                            Some(f) if bi < *f => S::zero(),
                            _ => -gi * ai / (bi * bi),
                        })
                        .collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::Concat(parts) => {
                let [n, total, h, w] = node.value.dims4("concat").expect("rank 4");
                let hw = h * w;
                let mut offset = 0;
                for p in parts {
                    let pc = self.nodes[p.0].value.shape()[1];
                    if want(p) {
                        let mut dp = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let base = (s * total + offset) * hw;
                            dp.extend_from_slice(&g[base..base + pc * hw]);
                        }
                        accumulate(grads, *p, dp);
                    }
                    offset += pc;
                }
            }
            Op::Clamp { x, lo, hi } => {
                if want(x) {
                    let xv = self.nodes[x.0].value.data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| if xi >= *lo && xi <= *hi { gi } else { S::zero() })
                        .collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::Scale { x, c } => {
                if want(x) {
                    accumulate(grads, *x, g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::Sum(x) => {
                if want(x) {
                    accumulate(grads, *x, vec![g[0]; self.nodes[x.0].value.len()]);
                }
            }
            Op::Mean(x) => {
                if want(x) {
                    let len = self.nodes[x.0].value.len();
                    accumulate(grads, *x, vec![g[0] / S::lit(len.max(1) as f64); len]);
                }
            }
            Op::Mse(a, b) => {
                let va = self.nodes[a.0].value.data();
                let vb = self.nodes[b.0].value.data();
                let k = g[0] * S::lit(2.0 / va.len().max(1) as f64);
                if want(a) {
                    accumulate(grads, *a, va.iter().zip(vb).map(|(&x, &y)| k * (x - y)).collect());
                }
                if want(b) {
                    accumulate(grads, *b, va.iter().zip(vb).map(|(&x, &y)| k * (y - x)).collect());
                }
            }
            Op::WeightedAbsDiff { x, wh, wv, scale } => {
                if want(x) {
                    let [n, c, h, w] = self.nodes[x.0].value.dims4("weighted_abs_diff").expect("rank 4");
                    let xv = self.nodes[x.0].value.data();
                    let k = g[0] * *scale;
                    let mut dx = vec![S::zero(); xv.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * h * w;
                            for r in 0..h {
                                for q in 0..w {
                                    let here = base + r * w + q;
                                    if q + 1 < w {
                                        let wt = wh.data()[(s * h + r) * (w - 1) + q] * k;
                                        let d = sign(xv[here + 1] - xv[here]) * wt;
                                        dx[here + 1] = dx[here + 1] + d;
                                        dx[here] = dx[here] - d;
                                    }
                                    if r + 1 < h {
                                        let wt = wv.data()[(s * (h - 1) + r) * w + q] * k;
                                        let d = sign(xv[here + w] - xv[here]) * wt;
                                        dx[here + w] = dx[here + w] + d;
                                        dx[here] = dx[here] - d;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    // Split by sign so exp never overflows.
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Output column range `[lo, hi)` whose input column `ow·s + kj − pad`
    /// falls inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let mut lo = 0;
        while lo < self.wo && (lo * self.stride + kj) < self.pad {
            lo += 1;
        }
        let mut hi = self.wo;
        while hi > lo && (hi - 1) * self.stride + kj >= self.pad + self.w {
            hi -= 1;
        }
        (lo, hi)
    }
}

fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, cols: &mut [S]) {
    let p = g.ho * g.wo;
    for ch in 0..g.c {
        let plane = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ch * g.kh + ki) * g.kw + kj) * p;
                let (lo, hi) = g.valid_cols(kj);
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut cols[row + oh * g.wo..row + (oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    dst[..lo].fill(S::zero());
                    dst[hi..].fill(S::zero());
                    for (ow, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                        *d = src[ow * g.stride + kj - g.pad];
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, dx: &mut [S]) {
    let p = g.ho * g.wo;
    for ch in 0..g.c {
        let plane = &mut dx[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ch * g.kh + ki) * g.kw + kj) * p;
                let (lo, hi) = g.valid_cols(kj);
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oh * g.wo..row + (oh + 1) * g.wo];
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in lo..hi {
                        let iw = ow * g.stride + kj - g.pad;
                        dst[iw] = dst[iw] + src[ow];
                    }
                }
            }
        }
    }
}

/// Fold observed batch statistics into running statistics:
/// `running ← (1 − momentum)·running + momentum·observed`.
pub fn update_running<S: Scalar>(running: &mut [S], observed: &[S], momentum: S) {
    for (r, &o) in running.iter_mut().zip(observed) {
        *r = (S::one() - momentum) * *r + momentum * o;
    }
}
