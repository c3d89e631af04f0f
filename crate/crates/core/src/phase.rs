//! Learning, adaptation and testing drivers.
//!
//! * learn: per minibatch, one inner step on the decoder `v` with the
//!   training split, one outer step on the encoder `u` with the one-step
//!   hypergradient against the validation split, and one denoiser step on
//!   mixed noisy/clean reflectances. In RBL mode a decoder initialization
//!   `ṽ` is trained alongside and `v` is reset to `ṽ` at every episode start.
//! * adapt: the encoder is frozen; the decoder (and optionally the denoiser)
//!   are trained with ADAM on a new scene. Naive mode trains the whole
//!   network from scratch instead.
//! * test: evaluation-mode enhancement plus metrics.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::bilevel::{
    adam_update, bl_hypergradient, check_not_frozen, rbl_hypergradient, AdamConfig, AdamState, Evaluation, FdEpsilon,
    GradRequest, Objective,
};
use crate::data::{SceneDataset, ScenePair};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{adaptive_denoise_loss, supervised_loss, unsupervised_loss, SmoothnessContext};
use crate::metrics::{psnr, MetricReport, MetricRow};
use crate::net::{EnhanceNet, EnhanceOutput, ForwardMode, DECODER, DENOISER, ENCODER, META_INIT};
use crate::params::ParamSet;
use crate::rng::{stream, stream_indexed};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Bl,
    Rbl,
    Naive,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Bl => "BL",
            Mode::Rbl => "RBL",
            Mode::Naive => "naive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "BL" => Some(Mode::Bl),
            "RBL" => Some(Mode::Rbl),
            "naive" => Some(Mode::Naive),
            _ => None,
        }
    }
}

/// How the decoder is updated during learning. The hypergradient always
/// models the update as one SGD step of size `ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerOptimizer {
    Sgd,
    Adam,
}

impl InnerOptimizer {
    pub fn name(self) -> &'static str {
        match self {
            InnerOptimizer::Sgd => "sgd",
            InnerOptimizer::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(InnerOptimizer::Sgd),
            "adam" => Some(InnerOptimizer::Adam),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilevelConfig {
    /// Inner step size.
    pub xi: f64,
    pub fd_epsilon: FdEpsilon,
    pub adam: AdamConfig,
    pub inner: InnerOptimizer,
    pub learn_epochs: usize,
    pub adapt_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Inner steps between resets `v ← ṽ` in RBL mode.
    pub rbl_episode: usize,
    /// Proximal weight tying `v` to `ṽ` in the RBL lower objective.
    pub rbl_prox: f64,
    pub freeze_bn_stats: bool,
    pub finetune_denoiser: bool,
    pub smoothness: SmoothnessContext,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        BilevelConfig {
            xi: 1e-3,
            fd_epsilon: FdEpsilon::default(),
            adam: AdamConfig::default(),
            inner: InnerOptimizer::Sgd,
            learn_epochs: 20,
            adapt_epochs: 20,
            batch_size: 8,
            seed: 0,
            clip_norm: 5.0,
            rbl_episode: 5,
            rbl_prox: 1.0,
            freeze_bn_stats: true,
            finetune_denoiser: false,
            smoothness: SmoothnessContext::default(),
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(String::from(m)));
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return fail("xi must be positive");
        }
        let eps_ok = match self.fd_epsilon {
            FdEpsilon::Fixed(e) | FdEpsilon::NormRelative(e) => e > 0.0 && e.is_finite(),
        };
        if !eps_ok {
            return fail("finite-difference epsilon must be positive");
        }
        let b = |v: f64| v > 0.0 && v < 1.0;
        if !b(self.adam.beta1) || !b(self.adam.beta2) {
            return fail("adam betas must lie in (0, 1)");
        }
        if !(self.adam.lr > 0.0) || !(self.adam.eps > 0.0) {
            return fail("adam lr and eps must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip norm must be positive");
        }
        if self.rbl_episode == 0 {
            return fail("rbl episode length must be positive");
        }
        if !(self.rbl_prox > 0.0) {
            return fail("rbl proximal weight must be positive");
        }
        Ok(())
    }
}

// --------------------------------------------------------------- records

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseTag {
    Learn,
    Adapt,
    Test,
}

impl PhaseTag {
    pub fn name(self) -> &'static str {
        match self {
            PhaseTag::Learn => "learn",
            PhaseTag::Adapt => "adapt",
            PhaseTag::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseRecord {
    pub phase: PhaseTag,
    pub epoch: usize,
    /// `train`, `val` or `test`.
    pub split: &'static str,
    pub loss: f64,
    pub psnr: f64,
    pub seconds: f64,
}

pub const RECORD_HEADER: &str = "phase,epoch,split,loss,psnr,seconds";

impl PhaseRecord {
    pub fn csv_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{:.6},{:.4},{:.3}",
            self.phase.name(),
            self.epoch,
            self.split,
            self.loss,
            self.psnr,
            self.seconds
        );
        s
    }
}

pub fn records_csv(records: &[PhaseRecord]) -> String {
    let mut s = String::from(RECORD_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Wall time source for records; the core crate has no clock of its own.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// Reports zero elapsed time.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

// ----------------------------------------------------------------- model

/// Every learned quantity of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub encoder: ParamSet<S>,
    pub decoder: ParamSet<S>,
    pub denoiser: ParamSet<S>,
    /// Batchnorm running statistics for encoder and decoder blocks.
    pub stats: ParamSet<S>,
    /// Decoder initialization `ṽ` (RBL only), stored under `decoder.*` names.
    pub meta_init: Option<ParamSet<S>>,
}

impl<S: Scalar> Model<S> {
    pub fn init(net: &EnhanceNet, seed: u64) -> Self {
        let mut rng = stream(seed, "init");
        Model {
            encoder: net.init_encoder(&mut rng),
            decoder: net.init_decoder(&mut rng),
            denoiser: net.init_denoiser(&mut rng),
            stats: net.init_stats(),
            meta_init: None,
        }
    }

    /// All tensors in one set; `ṽ` is renamed to `meta_init.*`.
    pub fn to_set(&self) -> ParamSet<S> {
        let mut all = self.encoder.merged(&self.decoder).merged(&self.denoiser).merged(&self.stats);
        if let Some(m) = &self.meta_init {
            all = all.merged(&m.rename_prefix(DECODER, META_INIT));
        }
        all
    }

    pub fn from_set(all: &ParamSet<S>) -> Result<Self> {
        let is_stat = |n: &str| n.ends_with(".running_mean") || n.ends_with(".running_var");
        let mut m = Model {
            encoder: ParamSet::new(),
            decoder: ParamSet::new(),
            denoiser: ParamSet::new(),
            stats: ParamSet::new(),
            meta_init: None,
        };
        let mut meta = ParamSet::new();
        for (name, t) in all.iter() {
            let target = if is_stat(name) {
                &mut m.stats
            } else if name.starts_with(ENCODER) {
                &mut m.encoder
            } else if name.starts_with(DECODER) {
                &mut m.decoder
            } else if name.starts_with(DENOISER) {
                &mut m.denoiser
            } else if name.starts_with(META_INIT) {
                &mut meta
            } else {
                return Err(Error::UnknownParameter(String::from(name)));
            };
            target.insert(name, t.clone());
        }
        if !meta.is_empty() {
            m.meta_init = Some(meta.rename_prefix(META_INIT, DECODER));
        }
        Ok(m)
    }

    /// Structural check against a network's layout.
    pub fn check_layout(&self, net: &EnhanceNet) -> Result<()> {
        let reference = Model::<S>::init(net, 0);
        self.encoder.check_structure(&reference.encoder)?;
        self.decoder.check_structure(&reference.decoder)?;
        self.denoiser.check_structure(&reference.denoiser)?;
        self.stats.check_structure(&reference.stats)?;
        if let Some(m) = &self.meta_init {
            m.check_structure(&reference.decoder)?;
        }
        Ok(())
    }
}

// ------------------------------------------------------------ objectives

/// A stacked minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch<S> {
    /// `[N,3,H,W]`.
    pub low: Tensor<S>,
    /// Present iff every member is paired.
    pub gt: Option<Tensor<S>>,
    /// Per-member noisy-scene flag.
    pub noisy: Vec<bool>,
}

impl<S: Scalar> LossBatch<S> {
    pub fn from_pairs(pairs: &[(&ScenePair<S>, bool)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config(String::from("empty minibatch")));
        }
        let lows: Vec<&Tensor<S>> = pairs.iter().map(|(p, _)| &p.low).collect();
        let paired = pairs.iter().filter(|(p, _)| p.gt.is_some()).count();
        let gt = if paired == pairs.len() {
            let gts: Vec<&Tensor<S>> = pairs.iter().filter_map(|(p, _)| p.gt.as_ref()).collect();
            Some(Tensor::stack(&gts)?)
        } else if paired == 0 {
            None
        } else {
            return Err(Error::Config(String::from("minibatch mixes paired and unpaired images")));
        };
        Ok(LossBatch {
            low: Tensor::stack(&lows)?,
            gt,
            noisy: pairs.iter().map(|&(_, n)| n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.noisy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy.is_empty()
    }
}

/// The brightening loss as a function of (encoder, decoder): supervised
/// when the batch has ground truth, unsupervised otherwise.
pub struct BrighteningObjective<'a, S> {
    pub net: &'a EnhanceNet,
    pub stats: &'a ParamSet<S>,
    pub mode: ForwardMode,
    pub smoothness: SmoothnessContext,
}

impl<S: Scalar> Objective<S> for BrighteningObjective<'_, S> {
    type Batch = LossBatch<S>;

    fn evaluate(&self, upper: &ParamSet<S>, lower: &ParamSet<S>, batch: &LossBatch<S>, want: GradRequest) -> Result<Evaluation<S>> {
        let mut g = Graph::new();
        let y = g.input(batch.low.clone());
        let (x, z) = self.net.brighten(&mut g, y, upper, lower, self.stats, self.mode)?;
        let loss = match &batch.gt {
            Some(gt) => supervised_loss(&mut g, z, gt)?,
            None => unsupervised_loss(&mut g, x, y, &self.smoothness)?,
        };
        let value = g.value(loss).item().unwrap_or_else(S::nan);
        if !value.is_finite() {
            return Err(Error::Diverged(format!("brightening loss is {}", value)));
        }
        let mut names: Vec<&str> = Vec::new();
        if want.upper {
            names.extend(upper.names());
        }
        if want.lower {
            names.extend(lower.names());
        }
        let grads = if names.is_empty() {
            ParamSet::new()
        } else {
            g.backward(loss, &names)?
        };
        let split = |set: &ParamSet<S>| -> ParamSet<S> {
            set.names()
                .filter_map(|n| grads.get(n).map(|t| (String::from(n), t.clone())))
                .collect()
        };
        let mut e = Evaluation::new(
            Some(value),
            want.upper.then(|| split(upper)),
            want.lower.then(|| split(lower)),
        );
        e.batch_stats = g.take_batch_stats();
        e.output = Some(g.value(z).clone());
        Ok(e)
    }
}

/// Objective over (decoder initialization `ṽ`, decoder `v`): the brightening
/// loss at `v` plus `(μ/2)‖v − ṽ‖²`. Its `ṽ`-gradient `μ(ṽ − v)` is exact
/// and needs no network pass.
pub struct MetaObjective<'a, S> {
    pub inner: &'a BrighteningObjective<'a, S>,
    pub encoder: &'a ParamSet<S>,
    pub prox: S,
}

impl<S: Scalar> Objective<S> for MetaObjective<'_, S> {
    type Batch = LossBatch<S>;

    fn evaluate(&self, upper: &ParamSet<S>, lower: &ParamSet<S>, batch: &LossBatch<S>, want: GradRequest) -> Result<Evaluation<S>> {
        let mut diff = lower.plus_scaled(-S::one(), upper)?;
        let mut e = if want.value || want.lower {
            let mut e = self.inner.evaluate(
                self.encoder,
                lower,
                batch,
                GradRequest {
                    value: true,
                    upper: false,
                    lower: want.lower,
                },
            )?;
            let half = S::lit(0.5);
            e.loss = e.loss.map(|l| l + half * self.prox * diff.dot(&diff).unwrap_or_else(|_| S::nan()));
            if let Some(gl) = e.lower.as_mut() {
                gl.axpy(self.prox, &diff)?;
            }
            e
        } else {
            Evaluation::new(None, None, None)
        };
        if want.upper {
            diff.scale(-self.prox);
            e.upper = Some(diff);
        }
        Ok(e)
    }
}

// ------------------------------------------------------------- helpers

struct Trainer<S> {
    adam: AdamConfig,
    clip: S,
    state: AdamState<S>,
    frozen: BTreeSet<&'static str>,
}

impl<S: Scalar> Trainer<S> {
    fn new(cfg: &BilevelConfig, frozen: &[&'static str]) -> Self {
        Trainer {
            adam: cfg.adam,
            clip: S::lit(cfg.clip_norm),
            state: AdamState::new(),
            frozen: frozen.iter().copied().collect(),
        }
    }

    fn step(&mut self, params: &mut ParamSet<S>, mut grads: ParamSet<S>) -> Result<()> {
        check_not_frozen(&grads, &self.frozen)?;
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::Diverged(format!("non-finite gradient for {}", name)));
        }
        grads.clip_global_norm(self.clip);
        adam_update(params, &grads, &mut self.state, &self.adam)
    }
}

/// Apply one ADAM step to `params` while refusing gradients for any name
/// under a frozen prefix.
pub fn guarded_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: ParamSet<S>,
    state: &mut AdamState<S>,
    cfg: &BilevelConfig,
    frozen: &[&'static str],
) -> Result<()> {
    let mut t = Trainer::new(cfg, frozen);
    core::mem::swap(&mut t.state, state);
    let r = t.step(params, grads);
    core::mem::swap(&mut t.state, state);
    r
}

fn batches(n: usize, size: usize, rng: &mut crate::rng::Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size).map(|c| c.to_vec()).collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean PSNR of `[N,3,H,W]` predictions against matching ground truth.
fn batch_psnr<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<f64> {
    let n = pred.shape()[0];
    let mut acc = Vec::with_capacity(n);
    for i in 0..n {
        acc.push(psnr(&pred.index0(i)?.clamp(S::zero(), S::one()), &gt.index0(i)?, 1.0)?);
    }
    Ok(mean(&acc))
}

/// Evaluation-mode brightening loss and output PSNR over a set of pairs.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_pairs<S: Scalar>(
    net: &EnhanceNet,
    encoder: &ParamSet<S>,
    decoder: &ParamSet<S>,
    denoiser: Option<&ParamSet<S>>,
    stats: &ParamSet<S>,
    pairs: &[(&ScenePair<S>, bool)],
    smoothness: &SmoothnessContext,
    chunk: usize,
) -> Result<(f64, f64)> {
    let (mut loss_sum, mut psnrs) = (0.0, Vec::new());
    for part in pairs.chunks(chunk.max(1)) {
        let batch = LossBatch::from_pairs(part)?;
        let mut g = Graph::new();
        let y = g.input(batch.low.clone());
        let v = net.enhance(&mut g, y, encoder, decoder, denoiser, stats, ForwardMode::EVAL)?;
        let loss = match &batch.gt {
            Some(gt) => supervised_loss(&mut g, v.z, gt)?,
            None => unsupervised_loss(&mut g, v.x, y, smoothness)?,
        };
        loss_sum += g.value(loss).item().unwrap_or_else(S::nan).as_f64() * part.len() as f64;
        if let Some(gt) = &batch.gt {
            for i in 0..part.len() {
                psnrs.push(psnr(&g.value(v.z_hat).index0(i)?, &gt.index0(i)?, 1.0)?);
            }
        }
        if !loss_sum.is_finite() {
            return Err(Error::Diverged(String::from("validation loss is not finite")));
        }
    }
    Ok((loss_sum / pairs.len().max(1) as f64, mean(&psnrs)))
}

/// One ADAM step of the denoiser on detached reflectances, split into the
/// noisy and clean groups of the batch.
fn denoiser_step<S: Scalar>(
    net: &EnhanceNet,
    denoiser: &mut ParamSet<S>,
    trainer: &mut Trainer<S>,
    z: &Tensor<S>,
    gt: &Tensor<S>,
    noisy: &[bool],
) -> Result<f64> {
    let group = |flag: bool| -> Result<Option<(Tensor<S>, Tensor<S>)>> {
        let idx: Vec<usize> = (0..noisy.len()).filter(|&i| noisy[i] == flag).collect();
        if idx.is_empty() {
            return Ok(None);
        }
        let zs: Vec<Tensor<S>> = idx.iter().map(|&i| z.index0(i)).collect::<Result<_>>()?;
        let gs: Vec<Tensor<S>> = idx.iter().map(|&i| gt.index0(i)).collect::<Result<_>>()?;
        Ok(Some((
            Tensor::stack(&zs.iter().collect::<Vec<_>>())?,
            Tensor::stack(&gs.iter().collect::<Vec<_>>())?,
        )))
    };
    let (a, b) = (group(true)?, group(false)?);
    let mut g = Graph::new();
    let run = |grp: &Option<(Tensor<S>, Tensor<S>)>, g: &mut Graph<S>| -> Result<Option<crate::graph::Var>> {
        match grp {
            Some((zz, _)) => {
                let zv = g.input(zz.clone());
                Ok(Some(net.denoise(g, zv, denoiser)?.0))
            }
            None => Ok(None),
        }
    };
    let za = run(&a, &mut g)?;
    let zb = run(&b, &mut g)?;
    let loss = adaptive_denoise_loss(
        &mut g,
        za.zip(a.as_ref()).map(|(v, (_, t))| (v, t)),
        zb.zip(b.as_ref()).map(|(v, (_, t))| (v, t)),
    )?;
    let value = g.value(loss).item().unwrap_or_else(S::nan).as_f64();
    let names: Vec<&str> = denoiser.names().collect();
    let grads = g.backward(loss, &names)?;
    trainer.step(denoiser, grads)?;
    Ok(value)
}

// ----------------------------------------------------------------- learn

#[derive(Debug, Clone)]
pub struct LearnOutcome<S> {
    pub model: Model<S>,
    pub records: Vec<PhaseRecord>,
}

/// Joint learning of the encoder (upper level), decoder (lower level) and
/// denoiser on the learnable scenes. `mode` must be BL or RBL.
pub fn learn_phase<S: Scalar>(
    net: &EnhanceNet,
    datasets: &[&SceneDataset<S>],
    mode: Mode,
    cfg: &BilevelConfig,
    clock: &dyn Clock,
) -> Result<LearnOutcome<S>> {
    cfg.validate()?;
    if mode == Mode::Naive {
        return Err(Error::Config(String::from("learn phase runs in BL or RBL mode")));
    }
    if datasets.len() < 2 {
        return Err(Error::Config(String::from("learn phase needs at least two scenes")));
    }
    if !datasets.iter().any(|d| d.noisy()) || !datasets.iter().any(|d| !d.noisy()) {
        return Err(Error::Config(String::from(
            "learn phase needs at least one noisy and one clean scene",
        )));
    }
    if let Some(d) = datasets.iter().find(|d| !d.spec.paired) {
        return Err(Error::Config(format!("learning scene {} has no ground truth", d.spec.id)));
    }
    let train: Vec<(&ScenePair<S>, bool)> = datasets
        .iter()
        .flat_map(|d| d.learn.train.iter().map(move |p| (p, d.noisy())))
        .collect();
    let val: Vec<(&ScenePair<S>, bool)> = datasets
        .iter()
        .flat_map(|d| d.learn.val.iter().map(move |p| (p, d.noisy())))
        .collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(String::from("learning pools are empty")));
    }

    let mut model = Model::<S>::init(net, cfg.seed);
    if mode == Mode::Rbl {
        model.meta_init = Some(model.decoder.clone());
    }
    let mut records = Vec::new();
    let t0 = clock.seconds();
    let xi = S::lit(cfg.xi);
    let prox = S::lit(cfg.rbl_prox);
    let mut enc_trainer = Trainer::new(cfg, &[DECODER, DENOISER]);
    let mut dec_trainer = Trainer::new(cfg, &[ENCODER, DENOISER]);
    let mut meta_trainer = Trainer::new(cfg, &[ENCODER, DENOISER]);
    let mut den_trainer = Trainer::new(cfg, &[ENCODER, DECODER]);
    let mut val_rng = stream(cfg.seed, "batching/val");
    let mut inner_steps = 0usize;

    for epoch in 1..=cfg.learn_epochs {
        let mut rng = stream_indexed(cfg.seed, "batching/learn", epoch as u64);
        let (mut losses, mut psnrs) = (Vec::new(), Vec::new());
        for idx in batches(train.len(), cfg.batch_size, &mut rng) {
            let members: Vec<(&ScenePair<S>, bool)> = idx.iter().map(|&i| train[i]).collect();
            let tr = LossBatch::from_pairs(&members)?;
            let vmembers: Vec<(&ScenePair<S>, bool)> = (0..cfg.batch_size.min(val.len()))
                .map(|_| val[val_rng.random_range(0..val.len())])
                .collect();
            let vb = LossBatch::from_pairs(&vmembers)?;

            if let (Mode::Rbl, Some(meta)) = (mode, &model.meta_init) {
                if inner_steps.is_multiple_of(cfg.rbl_episode) {
                    model.decoder = meta.clone();
                }
            }

            // (i) inner step on the decoder
            let obj = BrighteningObjective {
                net,
                stats: &model.stats,
                mode: ForwardMode::TRAIN,
                smoothness: cfg.smoothness,
            };
            let inner_eval = match (mode, &model.meta_init) {
                (Mode::Rbl, Some(meta)) => MetaObjective {
                    inner: &obj,
                    encoder: &model.encoder,
                    prox,
                }
                .evaluate(meta, &model.decoder, &tr, GradRequest::LOWER)?,
                _ => obj.evaluate(&model.encoder, &model.decoder, &tr, GradRequest::LOWER)?,
            };
            let z = inner_eval.output.clone().ok_or_else(|| Error::Config(String::from("missing reflectance")))?;
            let observed = inner_eval.batch_stats.clone();
            losses.push(inner_eval.loss.map(|l| l.as_f64()).unwrap_or(f64::NAN));
            let gt = tr.gt.as_ref().expect("learning scenes are paired");
            psnrs.push(batch_psnr(&z, gt)?);
            let mut gv = inner_eval
                .lower
                .ok_or_else(|| Error::Config(String::from("missing decoder gradient")))?;
            match cfg.inner {
                InnerOptimizer::Sgd => {
                    if let Some(name) = gv.first_non_finite() {
                        return Err(Error::Diverged(format!("non-finite gradient for {}", name)));
                    }
                    gv.clip_global_norm(S::lit(cfg.clip_norm));
                    model.decoder.axpy(-xi, &gv)?;
                }
                InnerOptimizer::Adam => dec_trainer.step(&mut model.decoder, gv)?,
            }
            inner_steps += 1;

            // (ii) outer step on the encoder
            let hyper = bl_hypergradient(&obj, &obj, &model.encoder, &model.decoder, &tr, &vb, xi, cfg.fd_epsilon)?;
            // RBL: decoder initialization
            let meta_grad = match (mode, &model.meta_init) {
                (Mode::Rbl, Some(meta)) => {
                    let lower = MetaObjective {
                        inner: &obj,
                        encoder: &model.encoder,
                        prox,
                    };
                    let upper = MetaObjective {
                        inner: &obj,
                        encoder: &model.encoder,
                        prox: S::zero(),
                    };
                    Some(rbl_hypergradient(&upper, &lower, meta, &model.decoder, &tr, &vb, xi, cfg.fd_epsilon)?.grad)
                }
                _ => None,
            };
            enc_trainer.step(&mut model.encoder, hyper.grad)?;
            if let (Some(g), Some(meta)) = (meta_grad, model.meta_init.as_mut()) {
                meta_trainer.step(meta, g)?;
            }
            net.update_stats(&mut model.stats, &observed, &[ENCODER, DECODER])?;

            // (iii) denoiser on the detached reflectance
            denoiser_step(net, &mut model.denoiser, &mut den_trainer, &z, gt, &tr.noisy)?;
        }
        let seconds = clock.seconds() - t0;
        records.push(PhaseRecord {
            phase: PhaseTag::Learn,
            epoch,
            split: "train",
            loss: mean(&losses),
            psnr: mean(&psnrs),
            seconds,
        });
        let (vl, vp) = evaluate_pairs(
            net,
            &model.encoder,
            &model.decoder,
            Some(&model.denoiser),
            &model.stats,
            &val,
            &cfg.smoothness,
            cfg.batch_size,
        )?;
        records.push(PhaseRecord {
            phase: PhaseTag::Learn,
            epoch,
            split: "val",
            loss: vl,
            psnr: vp,
            seconds,
        });
    }
    Ok(LearnOutcome { model, records })
}

// ----------------------------------------------------------------- adapt

#[derive(Debug, Clone)]
pub struct AdaptOutcome<S> {
    pub model: Model<S>,
    pub records: Vec<PhaseRecord>,
    /// Encoder checksum before and after (equal unless naive).
    pub encoder_checksum: (u64, u64),
}

impl<S> AdaptOutcome<S> {
    pub fn encoder_frozen(&self) -> bool {
        self.encoder_checksum.0 == self.encoder_checksum.1
    }
}

/// Random decoder weights and fresh decoder statistics for adaptation.
pub fn random_decoder<S: Scalar>(net: &EnhanceNet, seed: u64) -> ParamSet<S> {
    net.init_decoder(&mut stream(seed, "init/adapt-decoder"))
}

/// Reset the decoder statistics of `stats` to their initial values.
pub fn reset_decoder_stats<S: Scalar>(net: &EnhanceNet, stats: &ParamSet<S>) -> ParamSet<S> {
    stats.merged(&net.init_stats::<S>().filter_prefix(DECODER))
}

/// Adapt to one scene. In BL/RBL mode `model.encoder` is frozen and
/// `model.decoder` is the starting point; naive mode re-initializes and
/// trains the whole network. Epoch 0 records the untrained state.
pub fn adapt_phase<S: Scalar>(
    net: &EnhanceNet,
    model: &Model<S>,
    dataset: &SceneDataset<S>,
    mode: Mode,
    use_denoiser: bool,
    cfg: &BilevelConfig,
    clock: &dyn Clock,
) -> Result<AdaptOutcome<S>> {
    cfg.validate()?;
    let noisy = dataset.noisy();
    let train: Vec<(&ScenePair<S>, bool)> = dataset.adapt.train.iter().map(|p| (p, noisy)).collect();
    let val: Vec<(&ScenePair<S>, bool)> = dataset.adapt.val.iter().map(|p| (p, noisy)).collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!("scene {} has an empty adaptation pool", dataset.spec.id)));
    }
    let mut m = model.clone();
    let naive = mode == Mode::Naive;
    if naive {
        let fresh = Model::<S>::init(net, crate::rng::sub_seed(cfg.seed, "naive", 0));
        m.encoder = fresh.encoder;
        m.decoder = fresh.decoder;
        m.stats = fresh.stats;
    }
    let before = m.encoder.checksum();
    let finetune_denoiser = use_denoiser && cfg.finetune_denoiser && dataset.spec.paired;
    let forward = if naive || !cfg.freeze_bn_stats {
        ForwardMode::TRAIN
    } else {
        ForwardMode::FROZEN_ENCODER
    };
    let stat_prefixes: &[&str] = if forward.encoder == crate::net::BnUse::Batch {
        &[ENCODER, DECODER]
    } else {
        &[DECODER]
    };
    let frozen: &[&'static str] = if naive { &[DENOISER] } else { &[ENCODER, DENOISER] };
    let mut trainer = Trainer::new(cfg, frozen);
    let mut den_trainer = Trainer::new(cfg, &[ENCODER, DECODER]);
    let mut records = Vec::new();
    let t0 = clock.seconds();
    let eval = |m: &Model<S>| {
        evaluate_pairs(
            net,
            &m.encoder,
            &m.decoder,
            use_denoiser.then_some(&m.denoiser),
            &m.stats,
            &val,
            &cfg.smoothness,
            cfg.batch_size,
        )
    };
    let (vl, vp) = eval(&m)?;
    records.push(PhaseRecord {
        phase: PhaseTag::Adapt,
        epoch: 0,
        split: "val",
        loss: vl,
        psnr: vp,
        seconds: clock.seconds() - t0,
    });
    for epoch in 1..=cfg.adapt_epochs {
        let mut rng = stream_indexed(cfg.seed, "batching/adapt", epoch as u64);
        let (mut losses, mut psnrs) = (Vec::new(), Vec::new());
        for idx in batches(train.len(), cfg.batch_size, &mut rng) {
            let members: Vec<(&ScenePair<S>, bool)> = idx.iter().map(|&i| train[i]).collect();
            let tr = LossBatch::from_pairs(&members)?;
            let obj = BrighteningObjective {
                net,
                stats: &m.stats,
                mode: forward,
                smoothness: cfg.smoothness,
            };
            let want = GradRequest {
                value: true,
                upper: naive,
                lower: true,
            };
            let e = obj.evaluate(&m.encoder, &m.decoder, &tr, want)?;
            losses.push(e.loss.map(|l| l.as_f64()).unwrap_or(f64::NAN));
            let z = e.output.clone().ok_or_else(|| Error::Config(String::from("missing reflectance")))?;
            if let Some(gt) = &tr.gt {
                psnrs.push(batch_psnr(&z, gt)?);
            }
            let mut grads = e.lower.unwrap_or_default();
            if let Some(gu) = e.upper {
                grads = grads.merged(&gu);
            }
            let mut params = m.encoder.merged(&m.decoder);
            trainer.step(&mut params, grads)?;
            m.encoder = params.filter_prefix(ENCODER);
            m.decoder = params.filter_prefix(DECODER);
            net.update_stats(&mut m.stats, &e.batch_stats, stat_prefixes)?;
            if finetune_denoiser {
                let gt = tr.gt.as_ref().expect("paired scene");
                denoiser_step(net, &mut m.denoiser, &mut den_trainer, &z, gt, &tr.noisy)?;
            }
        }
        let seconds = clock.seconds() - t0;
        records.push(PhaseRecord {
            phase: PhaseTag::Adapt,
            epoch,
            split: "train",
            loss: mean(&losses),
            psnr: mean(&psnrs),
            seconds,
        });
        let (vl, vp) = eval(&m)?;
        records.push(PhaseRecord {
            phase: PhaseTag::Adapt,
            epoch,
            split: "val",
            loss: vl,
            psnr: vp,
            seconds,
        });
    }
    let after = m.encoder.checksum();
    if !naive && before != after {
        return Err(Error::FrozenViolation(String::from("encoder changed during adaptation")));
    }
    Ok(AdaptOutcome {
        model: m,
        records,
        encoder_checksum: (before, after),
    })
}

// ------------------------------------------------------------------ test

#[derive(Debug, Clone)]
pub struct TestOutcome<S> {
    pub report: MetricReport,
    pub outputs: Vec<EnhanceOutput<S>>,
}

/// Evaluation-mode enhancement and metrics for every pair, one row each.
pub fn test_phase<S: Scalar>(
    net: &EnhanceNet,
    model: &Model<S>,
    use_denoiser: bool,
    pairs: &[ScenePair<S>],
    chunk: usize,
) -> Result<TestOutcome<S>> {
    let mut report = MetricReport::default();
    let mut outputs = Vec::with_capacity(pairs.len());
    for part in pairs.chunks(chunk.max(1)) {
        let lows: Vec<&Tensor<S>> = part.iter().map(|p| &p.low).collect();
        let out = net.enhance_tensor(
            &Tensor::stack(&lows)?,
            &model.encoder,
            &model.decoder,
            use_denoiser.then_some(&model.denoiser),
            &model.stats,
        )?;
        for (i, p) in part.iter().enumerate() {
            let single = EnhanceOutput {
                illumination: out.illumination.index0(i)?,
                reflectance: out.reflectance.index0(i)?,
                noise_map: out.noise_map.index0(i)?,
                output: out.output.index0(i)?,
            };
            report
                .rows
                .push(MetricRow::compute(&p.id(), &single.output, &p.low, p.gt.as_ref())?);
            outputs.push(single);
        }
    }
    Ok(TestOutcome { report, outputs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_line_format() {
        let r = PhaseRecord {
            phase: PhaseTag::Adapt,
            epoch: 3,
            split: "val",
            loss: 0.125,
            psnr: 21.5,
            seconds: 1.25,
        };
        assert_eq!(r.csv_line(), "adapt,3,val,0.125000,21.5000,1.250");
        assert!(records_csv(&[r]).starts_with(RECORD_HEADER));
    }

    #[test]
    fn config_validation() {
        assert!(BilevelConfig::default().validate().is_ok());
        let bad = [
            BilevelConfig { xi: 0.0, ..Default::default() },
            BilevelConfig { fd_epsilon: FdEpsilon::Fixed(0.0), ..Default::default() },
            BilevelConfig { batch_size: 0, ..Default::default() },
            BilevelConfig {
                adam: AdamConfig { beta1: 1.0, ..Default::default() },
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [Mode::Bl, Mode::Rbl, Mode::Naive] {
            assert_eq!(Mode::parse(m.name()), Some(m));
        }
        assert_eq!(Mode::parse("bl"), None);
    }
}
