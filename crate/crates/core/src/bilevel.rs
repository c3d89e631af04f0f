//! One-step bilevel hypergradients.
//!
//! For an upper objective `F(u, v; D_val)` and a lower objective
//! `f(u, v; D_tr)` the lower solution is replaced by a single gradient step
//! `v' = v − ξ∇_v f(u, v)`, and the hypergradient
//!
//! ```text
//! ∇_u F(u, v') − ξ · ∇²_{u,v} f(u, v) · ∇_{v'} F(u, v')
//! ```
//!
//! is evaluated with the mixed second-derivative product replaced by the
//! central difference
//!
//! ```text
//! [∇_u f(u, v + εg) − ∇_u f(u, v − εg)] / 2ε,   g = ∇_{v'} F(u, v').
//! ```
//!
//! Only first-order gradients are ever taken. The meta-initialization variant
//! is the same computation with the decoder initialization `ṽ` playing the
//! role of `u`; it additionally requires `ṽ` and `v` to share structure.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::BatchStats;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which quantities an objective evaluation must produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub value: bool,
    pub upper: bool,
    pub lower: bool,
}

impl GradRequest {
    pub const UPPER: GradRequest = GradRequest {
        value: false,
        upper: true,
        lower: false,
    };
    pub const LOWER: GradRequest = GradRequest {
        value: true,
        upper: false,
        lower: true,
    };
    pub const BOTH: GradRequest = GradRequest {
        value: true,
        upper: true,
        lower: true,
    };
    pub const VALUE: GradRequest = GradRequest {
        value: true,
        upper: false,
        lower: false,
    };
}

#[derive(Debug, Clone)]
pub struct Evaluation<S> {
    /// Objective value; `None` when it was neither requested nor free.
    pub loss: Option<S>,
    pub upper: Option<ParamSet<S>>,
    pub lower: Option<ParamSet<S>>,
    /// Statistics observed by train-mode batchnorms during the evaluation.
    pub batch_stats: Vec<BatchStats<S>>,
    /// Model output of the pass, when the objective has one.
    pub output: Option<Tensor<S>>,
}

impl<S> Evaluation<S> {
    pub fn new(loss: Option<S>, upper: Option<ParamSet<S>>, lower: Option<ParamSet<S>>) -> Self {
        Evaluation {
            loss,
            upper,
            lower,
            batch_stats: Vec::new(),
            output: None,
        }
    }
}

/// An objective over an (upper, lower) pair of parameter sets.
pub trait Objective<S: Scalar> {
    type Batch: ?Sized;

    fn evaluate(
        &self,
        upper: &ParamSet<S>,
        lower: &ParamSet<S>,
        batch: &Self::Batch,
        want: GradRequest,
    ) -> Result<Evaluation<S>>;
}

/// An objective given by a closure; the batch is `()`.
pub struct FnObjective<F>(pub F);

impl<S, F> Objective<S> for FnObjective<F>
where
    S: Scalar,
    F: Fn(&ParamSet<S>, &ParamSet<S>, GradRequest) -> Result<Evaluation<S>>,
{
    type Batch = ();

    fn evaluate(&self, upper: &ParamSet<S>, lower: &ParamSet<S>, _: &(), want: GradRequest) -> Result<Evaluation<S>> {
        (self.0)(upper, lower, want)
    }
}

/// Finite-difference step for the mixed-derivative product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdEpsilon {
    Fixed(f64),
    /// `ε = c / ‖g‖₂`, so the perturbation `εg` has norm `c`.
    NormRelative(f64),
}

impl Default for FdEpsilon {
    fn default() -> Self {
        FdEpsilon::NormRelative(1e-2)
    }
}

impl FdEpsilon {
    pub fn resolve<S: Scalar>(self, direction: &ParamSet<S>) -> S {
        match self {
            FdEpsilon::Fixed(e) => S::lit(e),
            FdEpsilon::NormRelative(c) => S::lit(c) / direction.norm(),
        }
    }
}

fn lower_grad<S: Scalar>(e: Evaluation<S>) -> Result<ParamSet<S>> {
    e.lower
        .ok_or_else(|| Error::Config("objective did not return lower-level gradients".to_string()))
}

fn upper_grad<S: Scalar>(e: Evaluation<S>) -> Result<ParamSet<S>> {
    e.upper
        .ok_or_else(|| Error::Config("objective did not return upper-level gradients".to_string()))
}

fn ensure_finite<S: Scalar>(g: &ParamSet<S>, what: &str) -> Result<()> {
    match g.first_non_finite() {
        Some(name) => Err(Error::Diverged(format!("{} ({})", what, name))),
        None => Ok(()),
    }
}

/// `v' = v − ξ∇_v f(u, v; batch)`. Neither argument is modified.
pub fn lower_step<S: Scalar, O: Objective<S>>(
    f: &O,
    u: &ParamSet<S>,
    v: &ParamSet<S>,
    batch: &O::Batch,
    xi: S,
) -> Result<ParamSet<S>> {
    let g = lower_grad(f.evaluate(u, v, batch, GradRequest::LOWER)?)?;
    ensure_finite(&g, "lower-level gradient")?;
    v.plus_scaled(-xi, &g)
}

/// Central-difference estimate of `∇²_{u,v} f(u, v) · g`:
/// `[∇_u f(u, v + εg) − ∇_u f(u, v − εg)] / 2ε`.
pub fn finite_difference_mvp<S: Scalar, O: Objective<S>>(
    f: &O,
    u: &ParamSet<S>,
    v: &ParamSet<S>,
    direction: &ParamSet<S>,
    eps: S,
    batch: &O::Batch,
) -> Result<ParamSet<S>> {
    v.check_structure(direction)?;
    let gmax = direction.max_abs();
    if gmax == S::zero() {
        return Ok(u.zeros_like());
    }
    let resolution = S::epsilon() * v.max_abs().max(S::one());
    if !(eps > S::zero()) || !eps.is_finite() || eps * gmax <= resolution {
        return Err(Error::Tolerance(format!(
            "finite-difference step {} · |g|∞ {} is below float resolution {}",
            eps, gmax, resolution
        )));
    }
    let v_plus = v.plus_scaled(eps, direction)?;
    let v_minus = v.plus_scaled(-eps, direction)?;
    let mut plus = upper_grad(f.evaluate(u, &v_plus, batch, GradRequest::UPPER)?)?;
    let minus = upper_grad(f.evaluate(u, &v_minus, batch, GradRequest::UPPER)?)?;
    plus.axpy(-S::one(), &minus)?;
    plus.scale(S::one() / (eps + eps));
    ensure_finite(&plus, "finite-difference product")?;
    Ok(plus)
}

/// Parts of a hypergradient evaluation.
#[derive(Debug, Clone)]
pub struct Hypergradient<S> {
    /// `direct − ξ · correction`.
    pub grad: ParamSet<S>,
    /// `∇_u F(u, v')`.
    pub direct: ParamSet<S>,
    /// Finite-difference product (zero when `ξ = 0`).
    pub correction: ParamSet<S>,
    /// The one-step lower solution `v'`.
    pub lower_next: ParamSet<S>,
    /// `F(u, v')`.
    pub upper_loss: Option<S>,
    pub epsilon: S,
}

/// One-step hypergradient of `F` with respect to the upper variables `u`.
/// Neither `u` nor `v` is modified.
#[allow(clippy::too_many_arguments)]
pub fn bl_hypergradient<S, FU, FL, B>(
    upper_obj: &FU,
    lower_obj: &FL,
    u: &ParamSet<S>,
    v: &ParamSet<S>,
    train: &B,
    val: &B,
    xi: S,
    eps: FdEpsilon,
) -> Result<Hypergradient<S>>
where
    S: Scalar,
    B: ?Sized,
    FU: Objective<S, Batch = B>,
    FL: Objective<S, Batch = B>,
{
    let lower_next = if xi == S::zero() {
        v.clone()
    } else {
        lower_step(lower_obj, u, v, train, xi)?
    };
    let eval = upper_obj.evaluate(u, &lower_next, val, GradRequest::BOTH)?;
    let upper_loss = eval.loss;
    let direct = eval
        .upper
        .ok_or_else(|| Error::Config("objective did not return upper-level gradients".to_string()))?;
    let g = eval
        .lower
        .ok_or_else(|| Error::Config("objective did not return lower-level gradients".to_string()))?;
    ensure_finite(&direct, "upper-level gradient")?;
    ensure_finite(&g, "upper-level gradient wrt lower variables")?;
    let (correction, epsilon) = if xi == S::zero() || g.max_abs() == S::zero() {
        (u.zeros_like(), S::zero())
    } else {
        let e = eps.resolve(&g);
        (finite_difference_mvp(lower_obj, u, v, &g, e, train)?, e)
    };
    let grad = direct.plus_scaled(-xi, &correction)?;
    Ok(Hypergradient {
        grad,
        direct,
        correction,
        lower_next,
        upper_loss,
        epsilon,
    })
}

/// Hypergradient with respect to a lower-level initialization `ṽ`; `ṽ` and
/// `v` must share names and shapes.
#[allow(clippy::too_many_arguments)]
pub fn rbl_hypergradient<S, FU, FL, B>(
    upper_obj: &FU,
    lower_obj: &FL,
    meta_init: &ParamSet<S>,
    v: &ParamSet<S>,
    train: &B,
    val: &B,
    xi: S,
    eps: FdEpsilon,
) -> Result<Hypergradient<S>>
where
    S: Scalar,
    B: ?Sized,
    FU: Objective<S, Batch = B>,
    FL: Objective<S, Batch = B>,
{
    meta_init.check_structure(v)?;
    bl_hypergradient(upper_obj, lower_obj, meta_init, v, train, val, xi, eps)
}

// ------------------------------------------------------------- optimizers

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<S> {
    pub first: ParamSet<S>,
    pub second: ParamSet<S>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        AdamState {
            first: ParamSet::new(),
            second: ParamSet::new(),
            step: 0,
        }
    }
}

/// Bias-corrected ADAM step on the parameters named in `grads`.
pub fn adam_update<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &ParamSet<S>,
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.require(name)?;
        p.same_shape(g, "adam_update")?;
        if let Some(m) = state.first.get(name) {
            m.same_shape(g, "adam_update")?;
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let c1 = S::one() - b1.powi(t);
    let c2 = S::one() - b2.powi(t);
    let lr = S::lit(cfg.lr);
    let eps = S::lit(cfg.eps);
    for (name, g) in grads.iter() {
        if !state.first.contains(name) {
            state.first.insert(name, Tensor::zeros(g.shape().to_vec()));
            state.second.insert(name, Tensor::zeros(g.shape().to_vec()));
        }
        let m = state.first.get_mut(name).expect("inserted above");
        for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = b1 * *mi + (S::one() - b1) * gi;
        }
        let v = state.second.get_mut(name).expect("inserted above");
        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = b2 * *vi + (S::one() - b2) * gi * gi;
        }
        let m = state.first.get(name).expect("inserted above").data();
        let v = state.second.get(name).expect("inserted above").data();
        let p = params.get_mut(name).expect("checked above");
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            *pi = *pi - lr * (mi / c1) / ((vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// `params ← params − lr · grads`.
pub fn sgd_update<S: Scalar>(params: &mut ParamSet<S>, grads: &ParamSet<S>, lr: S) -> Result<()> {
    for (name, g) in grads.iter() {
        params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .axpy(-lr, g)?;
    }
    Ok(())
}

/// Reject a gradient set that touches any name under a frozen prefix.
pub fn check_not_frozen<S: Scalar>(grads: &ParamSet<S>, frozen: &BTreeSet<&str>) -> Result<()> {
    for name in grads.names() {
        if frozen.iter().any(|p| name.starts_with(p)) {
            return Err(Error::FrozenViolation(name.to_string()));
        }
    }
    Ok(())
}

/// Scalar toy problems with closed-form hypergradients.
pub mod toy {
    use super::*;

    pub fn scalar_set<S: Scalar>(name: &str, value: S) -> ParamSet<S> {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::scalar(value));
        p
    }

    pub fn scalar_of<S: Scalar>(p: &ParamSet<S>) -> S {
        p.iter().next().and_then(|(_, t)| t.item()).unwrap_or_else(S::nan)
    }

    /// Objective `φ(u, v)` on scalar sets with hand-written partials.
    pub struct Scalar2<S> {
        pub value: fn(S, S, S) -> S,
        pub d_upper: fn(S, S, S) -> S,
        pub d_lower: fn(S, S, S) -> S,
        /// Free coefficient passed as the third argument.
        pub coef: S,
    }

    impl<S: Scalar> Objective<S> for Scalar2<S> {
        type Batch = ();

        fn evaluate(&self, upper: &ParamSet<S>, lower: &ParamSet<S>, _: &(), want: GradRequest) -> Result<Evaluation<S>> {
            let (u, v) = (scalar_of(upper), scalar_of(lower));
            let name_u = upper.names().next().unwrap_or("u");
            let name_v = lower.names().next().unwrap_or("v");
            Ok(Evaluation::new(
                Some((self.value)(u, v, self.coef)),
                want.upper.then(|| scalar_set(name_u, (self.d_upper)(u, v, self.coef))),
                want.lower.then(|| scalar_set(name_v, (self.d_lower)(u, v, self.coef))),
            ))
        }
    }

    /// `F(u, v) = (v − a)²`.
    pub fn upper_quadratic<S: Scalar>(a: S) -> Scalar2<S> {
        Scalar2 {
            value: |_, v, a| (v - a) * (v - a),
            d_upper: |_, _, _| S::zero(),
            d_lower: |_, v, a| (v - a) + (v - a),
            coef: a,
        }
    }

    /// `f(u, v) = (v − u)²`.
    pub fn lower_proximal<S: Scalar>() -> Scalar2<S> {
        Scalar2 {
            value: |u, v, _| (v - u) * (v - u),
            d_upper: |u, v, _| (u - v) + (u - v),
            d_lower: |u, v, _| (v - u) + (v - u),
            coef: S::zero(),
        }
    }

    /// `f(u, v) = c·u·v + u² + v²`: bilinear coupling, so the mixed second
    /// derivative is exactly `c` everywhere.
    pub fn lower_bilinear<S: Scalar>(c: S) -> Scalar2<S> {
        Scalar2 {
            value: |u, v, c| c * u * v + u * u + v * v,
            d_upper: |u, v, c| c * v + u + u,
            d_lower: |u, v, c| c * u + v + v,
            coef: c,
        }
    }

    /// Closed-form hypergradient of `F = (v − a)²` when the lower solution
    /// is `v*(u) = u`: `dF/du = 2(u − a)`.
    pub fn exact_quadratic_hypergradient<S: Scalar>(u: S, a: S) -> S {
        (u - a) + (u - a)
    }
}
