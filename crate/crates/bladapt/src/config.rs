//! Run configuration: a UTF-8 `key = value` file with `#` comments, parsed
//! over defaults. Unknown or repeated keys are rejected. The canonical form
//! lists every key once, sorted, as `key=value`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bladapt_core::bilevel::FdEpsilon;
use bladapt_core::data::Scale;
use bladapt_core::phase::{BilevelConfig, InnerOptimizer, Mode};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Gen,
    Learn,
    Adapt,
    Test,
    Gradcheck,
    Oracle,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Gen,
        Command::Learn,
        Command::Adapt,
        Command::Test,
        Command::Gradcheck,
        Command::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Learn => "learn",
            Command::Adapt => "adapt",
            Command::Test => "test",
            Command::Gradcheck => "gradcheck",
            Command::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Command::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub seed: u64,
    pub scale: Scale,
    pub mode: Mode,
    pub workdir: PathBuf,
    /// Relative paths are taken from `workdir`.
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    pub image_size: usize,
    /// Target scene of adapt and test.
    pub scene: String,
    pub use_denoiser: bool,
    pub dump_images: bool,
    /// Write wall time into the logs; off gives byte-stable logs.
    pub log_time: bool,
    pub bilevel: BilevelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: None,
            seed: 0,
            scale: Scale::Tiny,
            mode: Mode::Bl,
            workdir: PathBuf::from("run"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            report_dir: PathBuf::from("reports"),
            image_size: bladapt_core::data::DEFAULT_SIZE,
            scene: String::from("C"),
            use_denoiser: true,
            dump_images: true,
            log_time: true,
            bilevel: BilevelConfig::default(),
        }
    }
}

fn fd_text(e: FdEpsilon) -> String {
    match e {
        FdEpsilon::Fixed(v) => format!("fixed:{}", v),
        FdEpsilon::NormRelative(v) => format!("relative:{}", v),
    }
}

fn parse_fd(s: &str) -> Option<FdEpsilon> {
    let (k, v) = s.split_once(':')?;
    let v: f64 = v.parse().ok()?;
    match k {
        "fixed" => Some(FdEpsilon::Fixed(v)),
        "relative" => Some(FdEpsilon::NormRelative(v)),
        _ => None,
    }
}

fn path_text(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

pub const KEYS: [&str; 29] = [
    "adam_eps",
    "adapt_epochs",
    "batch_size",
    "beta1",
    "beta2",
    "checkpoint_dir",
    "clip_norm",
    "command",
    "dump_images",
    "fd_epsilon",
    "finetune_denoiser",
    "freeze_bn_stats",
    "image_size",
    "inner_optimizer",
    "lambda",
    "learn_epochs",
    "log_time",
    "lr",
    "mode",
    "rbl_episode",
    "rbl_prox",
    "report_dir",
    "scale",
    "scene",
    "seed",
    "sigma",
    "use_denoiser",
    "workdir",
    "xi",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CliError::Validation(format!("config key `{}`: cannot parse `{}`", key, v)))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CliError::Validation(format!("config key `{}`: expected true or false, got `{}`", key, v))),
    }
}

impl RunConfig {
    /// Parse config text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("config line {}: expected key=value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), no + 1) {
                return Err(CliError::Validation(format!(
                    "config line {}: key `{}` already set on line {}",
                    no + 1,
                    k,
                    prev
                )));
            }
            cfg.set(k, v)
                .map_err(|e| CliError::Validation(format!("config line {}: {}", no + 1, e)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CliError::Missing {
                what: "config file",
                path: path.to_path_buf(),
                hint: "pass an existing file to --config (an empty file selects the defaults)",
            });
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let b = &mut self.bilevel;
        match key {
            "adam_eps" => b.adam.eps = num(key, v)?,
            "adapt_epochs" => b.adapt_epochs = num(key, v)?,
            "batch_size" => b.batch_size = num(key, v)?,
            "beta1" => b.adam.beta1 = num(key, v)?,
            "beta2" => b.adam.beta2 = num(key, v)?,
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(v),
            "clip_norm" => b.clip_norm = num(key, v)?,
            "command" => {
                self.command = match v {
                    "" => None,
                    _ => Some(Command::parse(v).ok_or_else(|| CliError::Validation(format!("unknown command `{}`", v)))?),
                }
            }
            "dump_images" => self.dump_images = boolean(key, v)?,
            "fd_epsilon" => {
                b.fd_epsilon = parse_fd(v).ok_or_else(|| {
                    CliError::Validation(format!("fd_epsilon must be fixed:<h> or relative:<c>, got `{}`", v))
                })?
            }
            "finetune_denoiser" => b.finetune_denoiser = boolean(key, v)?,
            "freeze_bn_stats" => b.freeze_bn_stats = boolean(key, v)?,
            "image_size" => self.image_size = num(key, v)?,
            "inner_optimizer" => {
                b.inner = InnerOptimizer::parse(v)
                    .ok_or_else(|| CliError::Validation(format!("inner_optimizer must be sgd or adam, got `{}`", v)))?
            }
            "lambda" => b.smoothness.lambda = num(key, v)?,
            "learn_epochs" => b.learn_epochs = num(key, v)?,
            "log_time" => self.log_time = boolean(key, v)?,
            "lr" => b.adam.lr = num(key, v)?,
            "mode" => {
                self.mode =
                    Mode::parse(v).ok_or_else(|| CliError::Validation(format!("mode must be BL, RBL or naive, got `{}`", v)))?
            }
            "rbl_episode" => b.rbl_episode = num(key, v)?,
            "rbl_prox" => b.rbl_prox = num(key, v)?,
            "report_dir" => self.report_dir = PathBuf::from(v),
            "scale" => {
                self.scale =
                    Scale::parse(v).ok_or_else(|| CliError::Validation(format!("scale must be tiny or small, got `{}`", v)))?
            }
            "scene" => self.scene = v.to_string(),
            "seed" => self.seed = num(key, v)?,
            "sigma" => b.smoothness.sigma = num(key, v)?,
            "use_denoiser" => self.use_denoiser = boolean(key, v)?,
            "workdir" => self.workdir = PathBuf::from(v),
            "xi" => b.xi = num(key, v)?,
            _ => return Err(CliError::Validation(format!("unknown config key `{}`", key))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let b = &self.bilevel;
        Some(match key {
            "adam_eps" => b.adam.eps.to_string(),
            "adapt_epochs" => b.adapt_epochs.to_string(),
            "batch_size" => b.batch_size.to_string(),
            "beta1" => b.adam.beta1.to_string(),
            "beta2" => b.adam.beta2.to_string(),
            "checkpoint_dir" => path_text(&self.checkpoint_dir),
            "clip_norm" => b.clip_norm.to_string(),
            "command" => self.command.map(|c| c.name().to_string()).unwrap_or_default(),
            "dump_images" => self.dump_images.to_string(),
            "fd_epsilon" => fd_text(b.fd_epsilon),
            "finetune_denoiser" => b.finetune_denoiser.to_string(),
            "freeze_bn_stats" => b.freeze_bn_stats.to_string(),
            "image_size" => self.image_size.to_string(),
            "inner_optimizer" => b.inner.name().to_string(),
            "lambda" => b.smoothness.lambda.to_string(),
            "learn_epochs" => b.learn_epochs.to_string(),
            "log_time" => self.log_time.to_string(),
            "lr" => b.adam.lr.to_string(),
            "mode" => self.mode.name().to_string(),
            "rbl_episode" => b.rbl_episode.to_string(),
            "rbl_prox" => b.rbl_prox.to_string(),
            "report_dir" => path_text(&self.report_dir),
            "scale" => self.scale.name().to_string(),
            "scene" => self.scene.clone(),
            "seed" => self.seed.to_string(),
            "sigma" => b.smoothness.sigma.to_string(),
            "use_denoiser" => self.use_denoiser.to_string(),
            "workdir" => path_text(&self.workdir),
            "xi" => b.xi.to_string(),
            _ => return None,
        })
    }

    pub fn to_canonical(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            s.push_str(k);
            s.push('=');
            s.push_str(&self.get(k).unwrap_or_default());
            s.push('\n');
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.bilevel_config().validate()?;
        let m = bladapt_core::net::EnhanceNet::SPATIAL_MULTIPLE;
        if self.image_size == 0 || !self.image_size.is_multiple_of(m) {
            return Err(CliError::Validation(format!(
                "image_size must be a positive multiple of {}, got {}",
                m, self.image_size
            )));
        }
        if self.scene.is_empty() || self.scene.contains(['/', '\\', ',']) {
            return Err(CliError::Validation(format!("bad scene id `{}`", self.scene)));
        }
        if !(self.bilevel.smoothness.sigma > 0.0) || !(self.bilevel.smoothness.lambda >= 0.0) {
            return Err(CliError::Validation(String::from("sigma must be positive and lambda non-negative")));
        }
        Ok(())
    }

    /// Phase configuration with the run seed applied.
    pub fn bilevel_config(&self) -> BilevelConfig {
        BilevelConfig {
            seed: self.seed,
            ..self.bilevel.clone()
        }
    }
}
