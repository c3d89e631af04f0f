//! Retinex-style enhancement network.
//!
//! The illumination estimator is a U-shaped encoder/decoder: four
//! down-sampling steps (block + 2×2 max pooling) and a bottom block on the
//! encoder side, four up-sampling steps (block + nearest upsampling, then
//! concatenation with the matching encoder feature) and a final block plus a
//! sigmoid head on the decoder side. A block is conv 3×3 → batchnorm →
//! leaky ReLU. Reflectance is `y / x`; the residual denoiser then subtracts
//! an estimated noise map from the reflectance.
//!
//! Parameter names: `encoder.*` (upper-level variables), `decoder.*`
//! (scene-specific lower-level variables), `denoiser.*`. Batchnorm running
//! statistics live in a separate set under `<block>.bn.running_mean` /
//! `<block>.bn.running_var`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graph::{update_running, BatchStats, BnMode, DivGuard, Graph, Var};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ENCODER: &str = "encoder.";
pub const DECODER: &str = "decoder.";
pub const DENOISER: &str = "denoiser.";
pub const META_INIT: &str = "meta_init.";

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Channel widths of the four down steps and the bottom block.
    pub widths: [usize; 5],
    pub denoiser_width: usize,
    pub leaky_slope: f64,
    /// Upper clamp on reflectance before denoising.
    pub z_max: f64,
    pub denom_floor: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            widths: [8, 16, 32, 64, 64],
            denoiser_width: 8,
            leaky_slope: 0.2,
            z_max: 4.0,
            denom_floor: crate::graph::DENOM_FLOOR,
            bn_eps: crate::graph::BN_EPS,
            bn_momentum: crate::graph::BN_MOMENTUM,
        }
    }
}

/// Which statistics a batchnorm group normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnUse {
    Batch,
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    pub encoder: BnUse,
    pub decoder: BnUse,
}

impl ForwardMode {
    pub const TRAIN: ForwardMode = ForwardMode {
        encoder: BnUse::Batch,
        decoder: BnUse::Batch,
    };
    pub const EVAL: ForwardMode = ForwardMode {
        encoder: BnUse::Running,
        decoder: BnUse::Running,
    };
    /// Encoder frozen including its statistics; decoder training.
    pub const FROZEN_ENCODER: ForwardMode = ForwardMode {
        encoder: BnUse::Running,
        decoder: BnUse::Batch,
    };
}

/// Graph handles of one enhancement pass.
#[derive(Debug, Clone, Copy)]
pub struct EnhanceVars {
    pub x: Var,
    pub z: Var,
    pub z_hat: Var,
    pub noise: Var,
}

/// Tensor results of one enhancement pass.
#[derive(Debug, Clone)]
pub struct EnhanceOutput<S> {
    pub illumination: Tensor<S>,
    pub reflectance: Tensor<S>,
    pub noise_map: Tensor<S>,
    pub output: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceNet {
    pub cfg: NetConfig,
}

struct ConvSpec {
    name: String,
    cin: usize,
    cout: usize,
    bias: bool,
    bn: bool,
}

impl EnhanceNet {
    pub fn new(cfg: NetConfig) -> Self {
        EnhanceNet { cfg }
    }

    /// Spatial extents must survive four 2× poolings.
    pub const SPATIAL_MULTIPLE: usize = 16;

    fn encoder_specs(&self) -> Vec<ConvSpec> {
        let w = self.cfg.widths;
        let mut specs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in w.iter().take(4).enumerate() {
            specs.push(block(format!("encoder.down{}", i), cin, cout));
            cin = cout;
        }
        specs.push(block(String::from("encoder.bottom"), cin, w[4]));
        specs
    }

    fn decoder_specs(&self) -> Vec<ConvSpec> {
        let w = self.cfg.widths;
        let mut specs = Vec::new();
        for i in 0..4 {
            let cin = if i == 0 { w[4] } else { 2 * w[4 - i] };
            specs.push(block(format!("decoder.up{}", i), cin, w[3 - i]));
        }
        specs.push(block(String::from("decoder.out"), 2 * w[0], w[0]));
        specs.push(ConvSpec {
            name: String::from("decoder.head"),
            cin: w[0],
            cout: 3,
            bias: true,
            bn: false,
        });
        specs
    }

    fn denoiser_specs(&self) -> Vec<ConvSpec> {
        let d = self.cfg.denoiser_width;
        let chans = [3, d, d, d, d, 3];
        (0..5)
            .map(|i| ConvSpec {
                name: format!("denoiser.conv{}", i),
                cin: chans[i],
                cout: chans[i + 1],
                bias: true,
                bn: false,
            })
            .collect()
    }

    fn init(specs: &[ConvSpec], rng: &mut Rng) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        for s in specs {
            let fan_in = (s.cin * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w = Tensor::from_fn([s.cout, s.cin, 3, 3], |_| rng.random_range(-bound..bound));
            p.insert(&format!("{}.conv.weight", s.name), w);
            if s.bias {
                p.insert(&format!("{}.conv.bias", s.name), Tensor::zeros([s.cout]));
            }
            if s.bn {
                p.insert(&format!("{}.bn.gamma", s.name), Tensor::full([s.cout], 1.0));
                p.insert(&format!("{}.bn.beta", s.name), Tensor::zeros([s.cout]));
            }
        }
        p
    }

    /// He-uniform (fan-in) weights, zero biases, unit/zero batchnorm affine.
    pub fn init_encoder<S: Scalar>(&self, rng: &mut Rng) -> ParamSet<S> {
        Self::init(&self.encoder_specs(), rng).cast()
    }

    pub fn init_decoder<S: Scalar>(&self, rng: &mut Rng) -> ParamSet<S> {
        Self::init(&self.decoder_specs(), rng).cast()
    }

    /// As the other initializers, except the last layer starts at zero so a
    /// fresh denoiser is the identity on the reflectance.
    pub fn init_denoiser<S: Scalar>(&self, rng: &mut Rng) -> ParamSet<S> {
        let mut p = Self::init(&self.denoiser_specs(), rng);
        if let Some(w) = p.get_mut("denoiser.conv4.conv.weight") {
            w.scale(0.0);
        }
        p.cast()
    }

    /// Running statistics (mean 0, variance 1) for every batchnorm.
    pub fn init_stats<S: Scalar>(&self) -> ParamSet<S> {
        let mut p = ParamSet::new();
        for s in self.encoder_specs().iter().chain(&self.decoder_specs()) {
            if s.bn {
                p.insert(&format!("{}.bn.running_mean", s.name), Tensor::zeros([s.cout]));
                p.insert(&format!("{}.bn.running_var", s.name), Tensor::full([s.cout], S::one()));
            }
        }
        p
    }

    fn block<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        x: Var,
        name: &str,
        params: &ParamSet<S>,
        stats: &ParamSet<S>,
        bn: BnUse,
    ) -> Result<Var> {
        let w = g.param(&format!("{}.conv.weight", name), params.require(&format!("{}.conv.weight", name))?);
        let y = g.conv2d(x, w, None, 1, 1)?;
        let gamma = g.param(&format!("{}.bn.gamma", name), params.require(&format!("{}.bn.gamma", name))?);
        let beta = g.param(&format!("{}.bn.beta", name), params.require(&format!("{}.bn.beta", name))?);
        let tag = format!("{}.bn", name);
        let eps = S::lit(self.cfg.bn_eps);
        let y = match bn {
            BnUse::Batch => g.batchnorm2d(y, gamma, beta, BnMode::Train { eps }, &tag)?,
            BnUse::Running => {
                let mean = stats.require(&format!("{}.running_mean", tag))?;
                let var = stats.require(&format!("{}.running_var", tag))?;
                g.batchnorm2d(
                    y,
                    gamma,
                    beta,
                    BnMode::Eval {
                        mean: mean.data(),
                        var: var.data(),
                        eps,
                    },
                    &tag,
                )?
            }
        };
        g.leaky_relu(y, S::lit(self.cfg.leaky_slope))
    }

    fn conv<S: Scalar>(&self, g: &mut Graph<S>, x: Var, name: &str, params: &ParamSet<S>) -> Result<Var> {
        let w = g.param(&format!("{}.conv.weight", name), params.require(&format!("{}.conv.weight", name))?);
        let b = g.param(&format!("{}.conv.bias", name), params.require(&format!("{}.conv.bias", name))?);
        g.conv2d(x, w, Some(b), 1, 1)
    }

    /// Illumination `x = F(y; u, v)`, strictly inside (0, 1).
    pub fn estimate_illumination<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        y: Var,
        encoder: &ParamSet<S>,
        decoder: &ParamSet<S>,
        stats: &ParamSet<S>,
        mode: ForwardMode,
    ) -> Result<Var> {
        let [_, c, h, w] = g.value(y).dims4("estimate_illumination")?;
        if c != 3 {
            return Err(Error::dim(
                "estimate_illumination",
                format!("channel axis (1) must be 3, got {}", c),
            ));
        }
        let m = Self::SPATIAL_MULTIPLE;
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::dim(
                "estimate_illumination",
                format!("spatial axes (2,3) {}x{} must be positive multiples of {}", h, w, m),
            ));
        }
        let mut skips = Vec::with_capacity(4);
        let mut t = y;
        for i in 0..4 {
            let f = self.block(g, t, &format!("encoder.down{}", i), encoder, stats, mode.encoder)?;
            skips.push(f);
            t = g.maxpool2d(f, 2)?;
        }
        t = self.block(g, t, "encoder.bottom", encoder, stats, mode.encoder)?;
        for i in 0..4 {
            let f = self.block(g, t, &format!("decoder.up{}", i), decoder, stats, mode.decoder)?;
            let up = g.upsample_nearest(f, 2)?;
            t = g.concat_channels(&[up, skips[3 - i]])?;
        }
        t = self.block(g, t, "decoder.out", decoder, stats, mode.decoder)?;
        let head = self.conv(g, t, "decoder.head", decoder)?;
        Ok(g.sigmoid(head))
    }

    /// `z = clamp(y / max(x, floor), 0, z_max)`.
    pub fn reflectance<S: Scalar>(&self, g: &mut Graph<S>, y: Var, x: Var) -> Result<Var> {
        let z = g.div(y, x, DivGuard::Clamp(S::lit(self.cfg.denom_floor)))?;
        Ok(g.clamp(z, S::zero(), S::lit(self.cfg.z_max)))
    }

    /// `(ẑ, noise)` with `noise = G(z)` and `ẑ = clamp(z − noise, 0, 1)`.
    pub fn denoise<S: Scalar>(&self, g: &mut Graph<S>, z: Var, denoiser: &ParamSet<S>) -> Result<(Var, Var)> {
        let mut t = z;
        for i in 0..5 {
            t = self.conv(g, t, &format!("denoiser.conv{}", i), denoiser)?;
            if i < 4 {
                t = g.relu(t);
            }
        }
        let residual = g.sub(z, t)?;
        Ok((g.clamp(residual, S::zero(), S::one()), t))
    }

    /// Brightening path only: illumination and reflectance.
    pub fn brighten<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        y: Var,
        encoder: &ParamSet<S>,
        decoder: &ParamSet<S>,
        stats: &ParamSet<S>,
        mode: ForwardMode,
    ) -> Result<(Var, Var)> {
        let x = self.estimate_illumination(g, y, encoder, decoder, stats, mode)?;
        let z = self.reflectance(g, y, x)?;
        Ok((x, z))
    }

    /// Full pipeline. Without a denoiser the output is `clamp(z, 0, 1)` and
    /// the noise map is zero.
    #[allow(clippy::too_many_arguments)]
    pub fn enhance<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        y: Var,
        encoder: &ParamSet<S>,
        decoder: &ParamSet<S>,
        denoiser: Option<&ParamSet<S>>,
        stats: &ParamSet<S>,
        mode: ForwardMode,
    ) -> Result<EnhanceVars> {
        let (x, z) = self.brighten(g, y, encoder, decoder, stats, mode)?;
        let (z_hat, noise) = match denoiser {
            Some(d) => self.denoise(g, z, d)?,
            None => {
                let zero = g.input(Tensor::zeros(g.value(z).shape().to_vec()));
                (g.clamp(z, S::zero(), S::one()), zero)
            }
        };
        Ok(EnhanceVars { x, z, z_hat, noise })
    }

    /// Evaluation-mode enhancement of a batch `[N,3,H,W]`.
    pub fn enhance_tensor<S: Scalar>(
        &self,
        y: &Tensor<S>,
        encoder: &ParamSet<S>,
        decoder: &ParamSet<S>,
        denoiser: Option<&ParamSet<S>>,
        stats: &ParamSet<S>,
    ) -> Result<EnhanceOutput<S>> {
        let mut g = Graph::new();
        let yv = g.input(y.clone());
        let v = self.enhance(&mut g, yv, encoder, decoder, denoiser, stats, ForwardMode::EVAL)?;
        Ok(EnhanceOutput {
            illumination: g.value(v.x).clone(),
            reflectance: g.value(v.z).clone(),
            noise_map: g.value(v.noise).clone(),
            output: g.value(v.z_hat).clone(),
        })
    }

    /// Fold the statistics observed by train-mode batchnorms into `stats`,
    /// restricted to tags starting with one of `prefixes`.
    pub fn update_stats<S: Scalar>(&self, stats: &mut ParamSet<S>, observed: &[BatchStats<S>], prefixes: &[&str]) -> Result<()> {
        let momentum = S::lit(self.cfg.bn_momentum);
        for b in observed {
            if !prefixes.iter().any(|p| b.tag.starts_with(p)) {
                continue;
            }
            for (suffix, values) in [("running_mean", &b.mean), ("running_var", &b.var)] {
                let name = format!("{}.{}", b.tag, suffix);
                let t = stats
                    .get_mut(&name)
                    .ok_or(Error::UnknownParameter(name))?;
                update_running(t.data_mut(), values, momentum);
            }
        }
        Ok(())
    }
}

fn block(name: String, cin: usize, cout: usize) -> ConvSpec {
    ConvSpec {
        name,
        cin,
        cout,
        bias: false,
        bn: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small() -> EnhanceNet {
        EnhanceNet::new(NetConfig {
            widths: [2, 3, 3, 4, 4],
            denoiser_width: 3,
            ..NetConfig::default()
        })
    }

    #[test]
    fn parameter_layout() {
        let net = EnhanceNet::new(NetConfig::default());
        let mut rng = stream(0, "init");
        let enc: ParamSet<f32> = net.init_encoder(&mut rng);
        let dec: ParamSet<f32> = net.init_decoder(&mut rng);
        let den: ParamSet<f32> = net.init_denoiser(&mut rng);
        assert!(enc.names().all(|n| n.starts_with(ENCODER)));
        assert!(dec.names().all(|n| n.starts_with(DECODER)));
        assert!(den.names().all(|n| n.starts_with(DENOISER)));
        // 5 blocks x (weight, gamma, beta)
        assert_eq!(enc.len(), 15);
        // 5 blocks x 3 + head weight/bias
        assert_eq!(dec.len(), 17);
        assert_eq!(den.len(), 10);
        assert_eq!(enc.get("encoder.down0.conv.weight").unwrap().shape(), &[8, 3, 3, 3]);
        assert_eq!(dec.get("decoder.up1.conv.weight").unwrap().shape(), &[32, 128, 3, 3]);
        assert_eq!(dec.get("decoder.head.conv.weight").unwrap().shape(), &[3, 8, 3, 3]);
        assert_eq!(net.init_stats::<f32>().len(), 20);
    }

    #[test]
    fn shape_and_range_contract() {
        let net = small();
        let mut rng = stream(1, "init");
        let enc: ParamSet<f64> = net.init_encoder(&mut rng);
        let dec: ParamSet<f64> = net.init_decoder(&mut rng);
        let stats = net.init_stats();
        let mut g = Graph::new();
        let y = g.input(Tensor::from_fn([2, 3, 16, 32], |i| ((i * 37) % 101) as f64 / 101.0));
        let x = net
            .estimate_illumination(&mut g, y, &enc, &dec, &stats, ForwardMode::TRAIN)
            .unwrap();
        assert_eq!(g.value(x).shape(), &[2, 3, 16, 32]);
        assert!(g.value(x).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let bad = g.input(Tensor::zeros([1, 3, 24, 16]));
        assert!(matches!(
            net.estimate_illumination(&mut g, bad, &enc, &dec, &stats, ForwardMode::TRAIN),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn reflectance_examples() {
        let net = small();
        let mut g = Graph::new();
        let y = g.input(Tensor::full([1, 3, 2, 2], 0.5));
        let one = g.input(Tensor::full([1, 3, 2, 2], 1.0));
        let z = net.reflectance(&mut g, y, one).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.5));
        let yy = g.input(Tensor::from_fn([1, 3, 2, 2], |i| 0.1 + 0.05 * i as f64));
        let z = net.reflectance(&mut g, yy, yy).unwrap();
        assert!(g.value(z).data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        // tiny illumination: floor then clamp
        let dark = g.input(Tensor::full([1, 3, 2, 2], 1e-9));
        let z = net.reflectance(&mut g, y, dark).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn zero_denoiser_is_clamp() {
        let net = small();
        let mut rng = stream(2, "init");
        let mut den: ParamSet<f64> = net.init_denoiser(&mut rng);
        for (_, t) in den.iter_mut() {
            t.scale(0.0);
        }
        let mut g = Graph::new();
        let z = g.input(Tensor::from_fn([1, 3, 4, 4], |i| i as f64 / 20.0 - 0.5));
        let (zh, noise) = net.denoise(&mut g, z, &den).unwrap();
        assert_eq!(g.value(zh), &g.value(z).clamp(0.0, 1.0));
        assert!(g.value(noise).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_denoiser_is_identity() {
        let net = small();
        let den: ParamSet<f64> = net.init_denoiser(&mut stream(3, "init"));
        let mut g = Graph::new();
        let z = g.input(Tensor::from_fn([1, 3, 4, 4], |i| i as f64 / 48.0));
        let (zh, _) = net.denoise(&mut g, z, &den).unwrap();
        assert_eq!(g.value(zh), g.value(z));
    }

    #[test]
    fn running_stats_update() {
        let net = small();
        let mut stats: ParamSet<f64> = net.init_stats();
        let obs = [BatchStats {
            tag: String::from("encoder.down0.bn"),
            mean: alloc::vec![1.0, 2.0],
            var: alloc::vec![3.0, 5.0],
        }];
        net.update_stats(&mut stats, &obs, &[DECODER]).unwrap();
        assert_eq!(stats.get("encoder.down0.bn.running_mean").unwrap().data(), &[0.0, 0.0]);
        net.update_stats(&mut stats, &obs, &[ENCODER]).unwrap();
        let m = stats.get("encoder.down0.bn.running_mean").unwrap().data();
        assert!((m[0] - 0.1).abs() < 1e-12 && (m[1] - 0.2).abs() < 1e-12);
        let v = stats.get("encoder.down0.bn.running_var").unwrap().data();
        assert!((v[0] - 1.2).abs() < 1e-12 && (v[1] - 1.4).abs() < 1e-12);
    }
}
