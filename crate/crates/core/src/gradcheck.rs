//! Central finite-difference gradient checks in f64.
//!
//! Relative error per coordinate is `|a − n| / max(|a|, |n|, floor)`; a
//! check passes when the maximum over all coordinates is within tolerance.
//!
//! Networks with ReLU-type activations and max pooling are only piecewise
//! smooth, so a ±h probe occasionally straddles a kink. When a coordinate
//! fails and the two one-sided differences disagree by more than the
//! observed error, the probe is repeated with steps h/10, h/100 and h/1000
//! and the best agreement is kept. A wrong gradient fails at every step.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graph::{BnMode, DivGuard, Graph, Var};
use crate::loss::{adaptive_denoise_loss, supervised_loss, unsupervised_loss, SmoothnessContext};
use crate::net::{EnhanceNet, ForwardMode, NetConfig};
use crate::params::ParamSet;
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// `tensor[index]` of the worst coordinate.
    pub worst: String,
    pub coordinates: usize,
    /// Coordinates re-probed with a smaller step because of a kink.
    pub refined: usize,
    pub passed: bool,
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compare `analytic` with central differences of `f` around `point`.
pub fn check_gradient(
    name: &str,
    point: &ParamSet<f64>,
    analytic: &ParamSet<f64>,
    mut f: impl FnMut(&ParamSet<f64>) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<CheckResult> {
    point.check_structure(analytic)?;
    let f0 = f(point)?;
    let mut probe = point.clone();
    let (mut worst, mut worst_at, mut count, mut refined) = (0.0f64, String::new(), 0usize, 0usize);
    let names: Vec<String> = point.names().map(String::from).collect();
    for tname in &names {
        let len = point.require(tname)?.len();
        for i in 0..len {
            let orig = point.require(tname)?.data()[i];
            let set = |p: &mut ParamSet<f64>, v: f64| {
                p.get_mut(tname).expect("present").data_mut()[i] = v;
            };
            let mut probe_at = |h: f64| -> Result<(f64, f64)> {
                set(&mut probe, orig + h);
                let fp = f(&probe)?;
                set(&mut probe, orig - h);
                let fm = f(&probe)?;
                set(&mut probe, orig);
                Ok(((fp - fm) / (2.0 * h), ((fp - f0) - (f0 - fm)).abs() / h))
            };
            let a = analytic.require(tname)?.data()[i];
            let (numeric, asymmetry) = probe_at(cfg.h)?;
            let mut e = relative_error(a, numeric, cfg.floor);
            if e > cfg.tol && asymmetry > (a - numeric).abs() {
                refined += 1;
                for k in [10.0, 100.0, 1000.0] {
                    let (n, _) = probe_at(cfg.h / k)?;
                    e = e.min(relative_error(a, n, cfg.floor));
                    if e <= cfg.tol {
                        break;
                    }
                }
            }
            if !(e <= worst) {
                worst = e;
                worst_at = format!("{}[{}]", tname, i);
            }
            count += 1;
        }
    }
    Ok(CheckResult {
        name: String::from(name),
        max_rel_error: worst,
        worst: worst_at,
        coordinates: count,
        refined,
        passed: worst <= cfg.tol,
    })
}

/// Builds a scalar loss from the graph leaves registered for a point.
pub type Builder = Box<dyn Fn(&mut Graph<f64>, &BTreeMap<String, Var>) -> Result<Var>>;

fn evaluate(point: &ParamSet<f64>, build: &Builder) -> Result<(f64, ParamSet<f64>)> {
    let mut g = Graph::new();
    let vars = g.params_from(point);
    let loss = build(&mut g, &vars)?;
    let value = g
        .value(loss)
        .item()
        .ok_or_else(|| Error::NonScalarLoss(g.value(loss).shape().to_vec()))?;
    Ok((value, g.backward_all(loss)?))
}

/// Check the tape's gradient of `build` at `point`.
pub fn check_graph(name: &str, point: &ParamSet<f64>, build: &Builder, cfg: &GradCheckConfig) -> Result<CheckResult> {
    let (_, analytic) = evaluate(point, build)?;
    check_gradient(name, point, &analytic, |p| Ok(evaluate(p, build)?.0), cfg)
}

/// A named scalar-loss construction and the point to check it at.
pub struct Case {
    pub name: &'static str,
    pub point: ParamSet<f64>,
    pub build: Builder,
}

impl Case {
    pub fn run(&self, cfg: &GradCheckConfig) -> Result<CheckResult> {
        check_graph(self.name, &self.point, &self.build, cfg)
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn set(entries: Vec<(&str, Tensor<f64>)>) -> ParamSet<f64> {
    entries.into_iter().map(|(n, t)| (String::from(n), t)).collect()
}

/// `Σ y ⊙ r` for a fixed random `r`, giving every output element a
/// distinct weight.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = stream(seed, "gradcheck/projection");
    let r = uniform(&mut rng, g.value(y).shape(), -1.0, 1.0);
    let r = g.input(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn var(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name).copied().ok_or_else(|| Error::UnknownParameter(String::from(name)))
}

/// Random values bounded away from `0` so kinks at zero are not straddled.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values (pooling windows have a unique maximum).
fn distinct(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 - 0.5).collect();
    rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), rng);
    Tensor::new(shape.to_vec(), vals).expect("sized")
}

/// The small network used by the pipeline checks.
pub fn check_net() -> EnhanceNet {
    EnhanceNet::new(NetConfig {
        widths: [2, 3, 3, 4, 4],
        denoiser_width: 3,
        ..NetConfig::default()
    })
}

/// Every primitive of the tape, every loss, and the full pipelines.
pub fn standard_cases(seed: u64) -> Vec<Case> {
    let mut rng = stream(seed, "gradcheck");
    let mut cases = Vec::new();
    let mut push = |name: &'static str, point: ParamSet<f64>, build: Builder| cases.push(Case { name, point, build });

    // conv2d
    let p = set(alloc::vec![
        ("x", uniform(&mut rng, &[2, 2, 5, 5], -1.0, 1.0)),
        ("w", uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0)),
        ("b", uniform(&mut rng, &[3], -1.0, 1.0)),
    ]);
    push(
        "conv2d",
        p.clone(),
        Box::new(|g, v| {
            let y = g.conv2d(var(v, "x")?, var(v, "w")?, Some(var(v, "b")?), 1, 1)?;
            project(g, y, 1)
        }),
    );
    push(
        "conv2d_stride2",
        p,
        Box::new(|g, v| {
            let y = g.conv2d(var(v, "x")?, var(v, "w")?, None, 2, 0)?;
            project(g, y, 2)
        }),
    );

    // batchnorm
    let p = set(alloc::vec![
        ("x", uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0)),
        ("gamma", uniform(&mut rng, &[2], 0.5, 1.5)),
        ("beta", uniform(&mut rng, &[2], -0.5, 0.5)),
    ]);
    push(
        "batchnorm2d_train",
        p.clone(),
        Box::new(|g, v| {
            let y = g.batchnorm2d(var(v, "x")?, var(v, "gamma")?, var(v, "beta")?, BnMode::Train { eps: 1e-5 }, "bn")?;
            project(g, y, 3)
        }),
    );
    push(
        "batchnorm2d_eval",
        p,
        Box::new(|g, v| {
            let (mean, var_) = ([0.1, -0.2], [0.5, 2.0]);
            let y = g.batchnorm2d(
                var(v, "x")?,
                var(v, "gamma")?,
                var(v, "beta")?,
                BnMode::Eval {
                    mean: &mean,
                    var: &var_,
                    eps: 1e-5,
                },
                "bn",
            )?;
            project(g, y, 4)
        }),
    );

    // activations
    let p = set(alloc::vec![("x", away_from_zero(&mut rng, &[2, 2, 3, 3]))]);
    push(
        "leaky_relu",
        p.clone(),
        Box::new(|g, v| {
            let y = g.leaky_relu(var(v, "x")?, 0.2)?;
            project(g, y, 5)
        }),
    );
    push(
        "relu",
        p.clone(),
        Box::new(|g, v| {
            let y = g.relu(var(v, "x")?);
            project(g, y, 6)
        }),
    );
    push(
        "sigmoid",
        p,
        Box::new(|g, v| {
            let y = g.sigmoid(var(v, "x")?);
            project(g, y, 7)
        }),
    );

    // resampling
    push(
        "maxpool2d",
        set(alloc::vec![("x", distinct(&mut rng, &[2, 2, 4, 6]))]),
        Box::new(|g, v| {
            let y = g.maxpool2d(var(v, "x")?, 2)?;
            project(g, y, 8)
        }),
    );
    push(
        "upsample_nearest",
        set(alloc::vec![("x", uniform(&mut rng, &[1, 2, 2, 3], -1.0, 1.0))]),
        Box::new(|g, v| {
            let y = g.upsample_nearest(var(v, "x")?, 2)?;
            project(g, y, 9)
        }),
    );

    // elementwise
    let p = set(alloc::vec![
        ("a", uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0)),
        ("b", uniform(&mut rng, &[1, 2, 3, 3], 0.3, 1.0)),
    ]);
    push(
        "add",
        p.clone(),
        Box::new(|g, v| {
            let y = g.add(var(v, "a")?, var(v, "b")?)?;
            project(g, y, 10)
        }),
    );
    push(
        "sub",
        p.clone(),
        Box::new(|g, v| {
            let y = g.sub(var(v, "a")?, var(v, "b")?)?;
            project(g, y, 11)
        }),
    );
    push(
        "mul",
        p.clone(),
        Box::new(|g, v| {
            let y = g.mul(var(v, "a")?, var(v, "b")?)?;
            project(g, y, 12)
        }),
    );
    push(
        "div",
        p.clone(),
        Box::new(|g, v| {
            let y = g.div(var(v, "a")?, var(v, "b")?, DivGuard::Clamp(1e-4))?;
            project(g, y, 13)
        }),
    );
    push(
        "div_strict",
        p.clone(),
        Box::new(|g, v| {
            let y = g.div(var(v, "a")?, var(v, "b")?, DivGuard::Strict(1e-4))?;
            project(g, y, 14)
        }),
    );
    push(
        "concat_channels",
        p.clone(),
        Box::new(|g, v| {
            let y = g.concat_channels(&[var(v, "a")?, var(v, "b")?])?;
            project(g, y, 15)
        }),
    );
    push(
        "clamp",
        set(alloc::vec![("x", Tensor::from_fn([1, 1, 3, 4], |i| [-0.9, -0.3, 0.2, 0.6, 1.4, 2.2][i % 6] + 0.01 * i as f64))]),
        Box::new(|g, v| {
            let y = g.clamp(var(v, "x")?, 0.0, 1.0);
            project(g, y, 16)
        }),
    );
    push(
        "scale",
        p.clone(),
        Box::new(|g, v| {
            let y = g.scale(var(v, "a")?, -1.7);
            project(g, y, 17)
        }),
    );
    push(
        "mean",
        p.clone(),
        Box::new(|g, v| {
            let m = g.mul(var(v, "a")?, var(v, "b")?)?;
            Ok(g.mean(m))
        }),
    );
    push(
        "mse",
        p,
        Box::new(|g, v| g.mse(var(v, "a")?, var(v, "b")?)),
    );
    let (n, h, w) = (2, 3, 4);
    let wh = uniform(&mut rng, &[n, h, w - 1], 0.0, 1.0);
    let wv = uniform(&mut rng, &[n, h - 1, w], 0.0, 1.0);
    push(
        "weighted_abs_diff",
        set(alloc::vec![("x", distinct(&mut rng, &[n, 2, h, w]))]),
        Box::new(move |g, v| g.weighted_abs_diff(var(v, "x")?, wh.clone(), wv.clone(), 0.7)),
    );

    // losses
    let gt = uniform(&mut rng, &[2, 3, 4, 4], 0.2, 1.0);
    let gt2 = gt.clone();
    push(
        "supervised_loss",
        set(alloc::vec![("z", uniform(&mut rng, &[2, 3, 4, 4], 0.0, 1.0))]),
        Box::new(move |g, v| supervised_loss(g, var(v, "z")?, &gt)),
    );
    let y = uniform(&mut rng, &[2, 3, 4, 4], 0.0, 1.0);
    push(
        "unsupervised_loss",
        set(alloc::vec![("x", uniform(&mut rng, &[2, 3, 4, 4], 0.1, 0.9))]),
        Box::new(move |g, v| {
            let yv = g.input(y.clone());
            unsupervised_loss(g, var(v, "x")?, yv, &SmoothnessContext::default())
        }),
    );
    let gt3 = uniform(&mut rng, &[1, 3, 4, 4], 0.2, 1.0);
    push(
        "adaptive_denoise_loss",
        set(alloc::vec![
            ("za", uniform(&mut rng, &[2, 3, 4, 4], 0.0, 1.0)),
            ("zb", uniform(&mut rng, &[1, 3, 4, 4], 0.0, 1.0)),
        ]),
        Box::new(move |g, v| adaptive_denoise_loss(g, Some((var(v, "za")?, &gt2)), Some((var(v, "zb")?, &gt3)))),
    );

    // full pipelines
    let net = check_net();
    let enc = net.init_encoder::<f64>(&mut rng);
    let mut dec = net.init_decoder::<f64>(&mut rng);
    let mut den = net.init_denoiser::<f64>(&mut rng);
    // a generic point: zero biases put dead ReLU units exactly on their kink,
    // and a zero last layer would carry no gradient
    for (name, t) in dec.iter_mut().chain(den.iter_mut()) {
        if name.ends_with(".bias") || name == "denoiser.conv4.conv.weight" {
            *t = uniform(&mut rng, t.shape(), -0.2, 0.2);
        }
    }
    let low = uniform(&mut rng, &[2, 3, 32, 32], 0.02, 0.5);
    let target = uniform(&mut rng, &[2, 3, 32, 32], 0.2, 1.0);
    let stats = net.init_stats::<f64>();
    let all = enc.merged(&dec).merged(&den);
    let split = |p: &ParamSet<f64>| (p.filter_prefix(crate::net::ENCODER), p.filter_prefix(crate::net::DECODER), p.filter_prefix(crate::net::DENOISER));
    {
        let (net, low, target, stats) = (net.clone(), low.clone(), target.clone(), stats.clone());
        push(
            "pipeline_supervised",
            all.clone(),
            Box::new(move |g, v| {
                let _ = v;
                let (e, d, n) = split(&point_of(g, v));
                let y = g.input(low.clone());
                let out = net.enhance(g, y, &e, &d, Some(&n), &stats, ForwardMode::TRAIN)?;
                supervised_loss(g, out.z_hat, &target)
            }),
        );
    }
    {
        let (net, low, stats) = (net.clone(), low.clone(), stats.clone());
        push(
            "pipeline_unsupervised",
            enc.merged(&dec),
            Box::new(move |g, v| {
                let (e, d, _) = split(&point_of(g, v));
                let y = g.input(low.clone());
                let (x, _) = net.brighten(g, y, &e, &d, &stats, ForwardMode::TRAIN)?;
                unsupervised_loss(g, x, y, &SmoothnessContext::default())
            }),
        );
    }
    cases
}

/// Current leaf values of the registered parameters.
fn point_of(g: &Graph<f64>, vars: &BTreeMap<String, Var>) -> ParamSet<f64> {
    vars.iter().map(|(n, &v)| (n.clone(), g.value(v).clone())).collect()
}

/// Run every standard case.
pub fn run_all(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    standard_cases(seed).iter().map(|c| c.run(cfg)).collect()
}
