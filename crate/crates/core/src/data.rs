//! Synthetic multi-scene benchmark.
//!
//! Every scene shares the same family of normal-light base images and
//! differs in how they are darkened and corrupted. Each image is a pure
//! function of `(seed, scene, pool, index)`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream_indexed, sub_seed};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_SIZE: usize = 64;
pub const BASE_MIN: f64 = 0.2;
pub const BASE_MAX: f64 = 1.0;
/// Fraction of each learning/adaptation pool used for training.
pub const TRAIN_FRACTION: (usize, usize) = (4, 5);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Degradation {
    Gamma(f64),
    Linear(f64),
}

impl Degradation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Degradation::Gamma(g) => v.powf(g),
            Degradation::Linear(s) => v * s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    None,
    /// Additive, `σ_n`.
    Gaussian(f64),
    /// Multiplicative, `low = d·(1 + n)`.
    Speckle(f64),
}

impl Noise {
    pub fn sigma(self) -> f64 {
        match self {
            Noise::None => 0.0,
            Noise::Gaussian(s) | Noise::Speckle(s) => s,
        }
    }

    pub fn is_noisy(self) -> bool {
        self.sigma() > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Tiny,
    Small,
}

impl Scale {
    /// Images per scene in the (learn, adapt, test) pools.
    pub fn pools(self) -> (usize, usize, usize) {
        match self {
            Scale::Tiny => (50, 50, 10),
            Scale::Small => (200, 200, 40),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::Tiny => "tiny",
            Scale::Small => "small",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tiny" => Some(Scale::Tiny),
            "small" => Some(Scale::Small),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub id: String,
    pub degradation: Degradation,
    pub noise: Noise,
    pub paired: bool,
    /// Used by the learning phase.
    pub learnable: bool,
    pub pools: (usize, usize, usize),
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scene {}: {}", self.id, m)));
        match self.degradation {
            Degradation::Gamma(g) if !(g >= 1.0) => return bad(format!("gamma {} < 1", g)),
            Degradation::Linear(s) if !(s > 0.0 && s < 1.0) => return bad(format!("linear scale {} outside (0,1)", s)),
            _ => {}
        }
        let s = self.noise.sigma();
        if !(0.0..=0.2).contains(&s) {
            return bad(format!("noise sigma {} outside [0, 0.2]", s));
        }
        let (l, a, t) = self.pools;
        if l == 0 || a == 0 || t == 0 {
            return bad(String::from("empty pool"));
        }
        Ok(())
    }

    pub fn is_noisy(&self) -> bool {
        self.noise.is_noisy()
    }
}

/// The five benchmark scenes: A and B are learned from, C, D and E are
/// unseen; E has no ground truth.
pub fn benchmark_specs(scale: Scale) -> Vec<SceneSpec> {
    let pools = scale.pools();
    let mk = |id: &str, degradation, noise, paired, learnable| SceneSpec {
        id: String::from(id),
        degradation,
        noise,
        paired,
        learnable,
        pools,
    };
    alloc::vec![
        mk("A", Degradation::Gamma(2.5), Noise::None, true, true),
        mk("B", Degradation::Gamma(3.0), Noise::Gaussian(0.05), true, true),
        mk("C", Degradation::Gamma(3.5), Noise::None, true, false),
        mk("D", Degradation::Linear(0.2), Noise::Speckle(0.03), true, false),
        mk("E", Degradation::Gamma(4.0), Noise::Gaussian(0.08), false, false),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pool {
    Learn,
    Adapt,
    Test,
}

impl Pool {
    pub const ALL: [Pool; 3] = [Pool::Learn, Pool::Adapt, Pool::Test];

    pub fn name(self) -> &'static str {
        match self {
            Pool::Learn => "learn",
            Pool::Adapt => "adapt",
            Pool::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Pool::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair<S> {
    pub scene: String,
    pub pool: Pool,
    pub index: usize,
    /// `[3,H,W]` in `[0,1]`.
    pub low: Tensor<S>,
    pub gt: Option<Tensor<S>>,
    /// Seed the noise of `low` was drawn from.
    pub noise_seed: u64,
}

impl<S: Scalar> ScenePair<S> {
    pub fn id(&self) -> String {
        format!("{}-{}-{:04}", self.scene, self.pool.name(), self.index)
    }
}

/// Training and validation parts of a pool.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split<S> {
    pub train: Vec<ScenePair<S>>,
    pub val: Vec<ScenePair<S>>,
}

impl<S: Scalar> Split<S> {
    /// First 80% train, remainder validation.
    pub fn from_pool(mut pairs: Vec<ScenePair<S>>) -> Self {
        let n_train = pairs.len() * TRAIN_FRACTION.0 / TRAIN_FRACTION.1;
        let val = pairs.split_off(n_train);
        Split { train: pairs, val }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset<S> {
    pub spec: SceneSpec,
    pub learn: Split<S>,
    pub adapt: Split<S>,
    pub test: Vec<ScenePair<S>>,
}

impl<S: Scalar> SceneDataset<S> {
    pub fn noisy(&self) -> bool {
        self.spec.is_noisy()
    }

    pub fn all_pairs(&self) -> impl Iterator<Item = &ScenePair<S>> {
        self.learn
            .train
            .iter()
            .chain(&self.learn.val)
            .chain(&self.adapt.train)
            .chain(&self.adapt.val)
            .chain(&self.test)
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
        return Err(Error::dim(
            "generate_base_image",
            format!("size {}x{} must be positive multiples of 16", h, w),
        ));
    }
    Ok(())
}

/// A normal-light image `[3,H,W]` with values in `[0.2, 1.0]`: a linear
/// colour gradient, a handful of flat rectangles and ellipses, and a
/// low-frequency sinusoidal texture.
pub fn generate_base_image(seed: u64, h: usize, w: usize) -> Result<Tensor<f64>> {
    check_size(h, w)?;
    let mut rng = stream_indexed(seed, "base", 0);
    let colour = |rng: &mut crate::rng::Rng| -> [f64; 3] {
        let base = rng.random_range(0.15..0.95);
        let mut c = [0.0; 3];
        for v in c.iter_mut() {
            *v = (base + rng.random_range(-0.25..0.25f64)).clamp(0.0, 1.0);
        }
        c
    };
    let c0 = colour(&mut rng);
    let c1 = colour(&mut rng);
    let angle: f64 = rng.random_range(0.0..2.0 * PI);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut img = alloc::vec![0.0f64; 3 * h * w];
    let hw = h * w;
    for r in 0..h {
        for q in 0..w {
            let (ny, nx) = (r as f64 / h as f64 - 0.5, q as f64 / w as f64 - 0.5);
            let t = ((nx * dx + ny * dy) / core::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                img[c * hw + r * w + q] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let shapes = rng.random_range(3..8);
    for _ in 0..shapes {
        let col = colour(&mut rng);
        let alpha = rng.random_range(0.5..1.0);
        let ellipse = rng.random_bool(0.5);
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let (ry, rx) = (
            rng.random_range(0.08..0.3) * h as f64,
            rng.random_range(0.08..0.3) * w as f64,
        );
        for r in 0..h {
            for q in 0..w {
                let (py, px) = ((r as f64 + 0.5 - cy) / ry, (q as f64 + 0.5 - cx) / rx);
                let inside = if ellipse {
                    px * px + py * py <= 1.0
                } else {
                    px.abs() <= 1.0 && py.abs() <= 1.0
                };
                if inside {
                    for c in 0..3 {
                        let v = &mut img[c * hw + r * w + q];
                        *v = *v * (1.0 - alpha) + col[c] * alpha;
                    }
                }
            }
        }
    }
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(1.0..6.0) * 2.0 * PI / w as f64,
                rng.random_range(1.0..6.0) * 2.0 * PI / h as f64,
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.02..0.06),
            )
        })
        .collect();
    for r in 0..h {
        for q in 0..w {
            let tex: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * q as f64 + fy * r as f64 + ph).sin())
                .sum();
            for c in 0..3 {
                let v = &mut img[c * hw + r * w + q];
                *v = BASE_MIN + (BASE_MAX - BASE_MIN) * (*v + tex).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([3, h, w], img)
}

/// `clamp(apply(gt) + noise, 0, 1)`.
pub fn degrade(gt: &Tensor<f64>, degradation: Degradation, noise: Noise, seed: u64) -> Tensor<f64> {
    let dark = gt.map(|v| degradation.apply(v));
    let mut rng = stream_indexed(seed, "noise", 0);
    let sigma = noise.sigma();
    let normal = Normal::new(0.0, if sigma > 0.0 { sigma } else { 1.0 }).expect("finite sigma");
    let mut out = dark;
    for d in out.data_mut() {
        let v = match noise {
            Noise::None => *d,
            Noise::Gaussian(_) => *d + normal.sample(&mut rng),
            Noise::Speckle(_) => *d * (1.0 + normal.sample(&mut rng)),
        };
        *d = v.clamp(0.0, 1.0);
    }
    out
}

/// Seeds of the base image and of the noise for one benchmark entry.
pub fn pair_seeds(seed: u64, scene: &str, pool: Pool, index: usize) -> (u64, u64) {
    let tag = format!("scene/{}/{}", scene, pool.name());
    (
        sub_seed(seed, &format!("{}/image", tag), index as u64),
        sub_seed(seed, &format!("{}/noise", tag), index as u64),
    )
}

pub fn generate_pair<S: Scalar>(seed: u64, spec: &SceneSpec, pool: Pool, index: usize, size: usize) -> Result<ScenePair<S>> {
    let (image_seed, noise_seed) = pair_seeds(seed, &spec.id, pool, index);
    let gt = generate_base_image(image_seed, size, size)?;
    let low = degrade(&gt, spec.degradation, spec.noise, noise_seed);
    Ok(ScenePair {
        scene: spec.id.clone(),
        pool,
        index,
        low: low.cast(),
        gt: spec.paired.then(|| gt.cast()),
        noise_seed,
    })
}

pub fn build_scene<S: Scalar>(seed: u64, spec: &SceneSpec, size: usize) -> Result<SceneDataset<S>> {
    spec.validate()?;
    let (nl, na, nt) = spec.pools;
    let pool = |p: Pool, n: usize| -> Result<Vec<ScenePair<S>>> {
        (0..n).map(|i| generate_pair(seed, spec, p, i, size)).collect()
    };
    Ok(SceneDataset {
        spec: spec.clone(),
        learn: Split::from_pool(pool(Pool::Learn, nl)?),
        adapt: Split::from_pool(pool(Pool::Adapt, na)?),
        test: pool(Pool::Test, nt)?,
    })
}

/// All five scenes at the given scale and square image size.
pub fn build_benchmark<S: Scalar>(seed: u64, scale: Scale, size: usize) -> Result<Vec<SceneDataset<S>>> {
    benchmark_specs(scale)
        .iter()
        .map(|spec| build_scene(seed, spec, size))
        .collect()
}

/// Stack `[3,H,W]` images into `[N,3,H,W]`.
pub fn stack_images<S: Scalar>(images: &[&Tensor<S>]) -> Result<Tensor<S>> {
    Tensor::stack(images)
}

/// FNV-1a over the raw bit patterns.
pub fn image_hash<S: Scalar>(t: &Tensor<S>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in t.data() {
        for b in v.as_f64().to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

pub fn mean_brightness<S: Scalar>(pairs: &[ScenePair<S>]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for p in pairs {
        s += p.low.data().iter().map(|v| v.as_f64()).sum::<f64>();
        n += p.low.len();
    }
    s / n.max(1) as f64
}
