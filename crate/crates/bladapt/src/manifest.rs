//! Dataset manifest: `#` header lines describing the run and each scene,
//! then one CSV row per image, `scene_id,split,index,low_path[,gt_path]`,
//! with paths relative to the workdir. `split` names the pool.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bladapt_core::data::{pair_seeds, Degradation, Noise, Pool, Scale, SceneDataset, ScenePair, SceneSpec, Split};
use bladapt_core::Scalar;

use crate::error::{CliError, Result};
use crate::image_io::load_image;

pub const TITLE: &str = "# bladapt manifest v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub scene: String,
    pub pool: Pool,
    pub index: usize,
    pub low: PathBuf,
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub scale: Scale,
    pub size: usize,
    pub scenes: Vec<SceneSpec>,
    pub rows: Vec<ManifestRow>,
}

pub fn degradation_text(d: Degradation) -> String {
    match d {
        Degradation::Gamma(g) => format!("gamma:{}", g),
        Degradation::Linear(s) => format!("linear:{}", s),
    }
}

pub fn noise_text(n: Noise) -> String {
    match n {
        Noise::None => String::from("none"),
        Noise::Gaussian(s) => format!("gaussian:{}", s),
        Noise::Speckle(s) => format!("speckle:{}", s),
    }
}

fn kind_value(s: &str) -> Option<(&str, f64)> {
    let (k, v) = s.split_once(':')?;
    Some((k, v.parse().ok()?))
}

pub fn parse_degradation(s: &str) -> Option<Degradation> {
    match kind_value(s)? {
        ("gamma", g) => Some(Degradation::Gamma(g)),
        ("linear", v) => Some(Degradation::Linear(v)),
        _ => None,
    }
}

pub fn parse_noise(s: &str) -> Option<Noise> {
    if s == "none" {
        return Some(Noise::None);
    }
    match kind_value(s)? {
        ("gaussian", v) => Some(Noise::Gaussian(v)),
        ("speckle", v) => Some(Noise::Speckle(v)),
        _ => None,
    }
}

fn flag(b: bool) -> u8 {
    b as u8
}

/// Relative image paths for one pair.
pub fn image_paths(scene: &str, pool: Pool, index: usize, paired: bool) -> (PathBuf, Option<PathBuf>) {
    let dir = Path::new("data").join(scene).join(pool.name());
    let low = dir.join(format!("{:04}_low.png", index));
    let gt = paired.then(|| dir.join(format!("{:04}_gt.png", index)));
    (low, gt)
}

fn path_text(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

impl Manifest {
    pub fn for_datasets<S: Scalar>(seed: u64, scale: Scale, size: usize, datasets: &[SceneDataset<S>]) -> Self {
        let mut rows = Vec::new();
        for d in datasets {
            for p in d.all_pairs() {
                let (low, gt) = image_paths(&d.spec.id, p.pool, p.index, d.spec.paired);
                rows.push(ManifestRow {
                    scene: d.spec.id.clone(),
                    pool: p.pool,
                    index: p.index,
                    low,
                    gt,
                });
            }
        }
        Manifest {
            seed,
            scale,
            size,
            scenes: datasets.iter().map(|d| d.spec.clone()).collect(),
            rows,
        }
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        let _ = writeln!(s, "{}", TITLE);
        let _ = writeln!(s, "# seed={} scale={} size={}", self.seed, self.scale.name(), self.size);
        for sc in &self.scenes {
            let _ = writeln!(
                s,
                "# scene={} degradation={} noise={} paired={} learnable={} noisy={} pools={}/{}/{}",
                sc.id,
                degradation_text(sc.degradation),
                noise_text(sc.noise),
                flag(sc.paired),
                flag(sc.learnable),
                flag(sc.is_noisy()),
                sc.pools.0,
                sc.pools.1,
                sc.pools.2
            );
        }
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
        for r in &self.rows {
            let mut rec = vec![r.scene.clone(), r.pool.name().to_string(), r.index.to_string(), path_text(&r.low)];
            if let Some(gt) = &r.gt {
                rec.push(path_text(gt));
            }
            w.write_record(&rec).map_err(|e| CliError::Validation(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| CliError::Validation(e.to_string()))?;
        s.push_str(&String::from_utf8_lossy(&body));
        Ok(s)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |m: String| CliError::format(path, m);
        let mut lines = text.lines();
        if lines.next() != Some(TITLE) {
            return Err(bad(String::from("missing manifest title line")));
        }
        let (mut seed, mut scale, mut size) = (None, None, None);
        let mut scenes = Vec::new();
        for line in text.lines().skip(1).take_while(|l| l.starts_with('#')) {
            let fields: Vec<(&str, &str)> = line[1..]
                .split_whitespace()
                .map(|t| t.split_once('=').ok_or_else(|| bad(format!("bad header token `{}`", t))))
                .collect::<Result<_>>()?;
            let get = |k: &str| fields.iter().find(|(a, _)| *a == k).map(|(_, v)| *v);
            if let Some(id) = get("scene") {
                let need = |k: &str| get(k).ok_or_else(|| bad(format!("scene {} lacks `{}`", id, k)));
                let bool_of = |k: &str| -> Result<bool> {
                    match need(k)? {
                        "1" => Ok(true),
                        "0" => Ok(false),
                        v => Err(bad(format!("scene {}: `{}` must be 0 or 1, got {}", id, k, v))),
                    }
                };
                let pools: Vec<usize> = need("pools")?
                    .split('/')
                    .map(|p| p.parse().map_err(|_| bad(format!("scene {}: bad pools", id))))
                    .collect::<Result<_>>()?;
                if pools.len() != 3 {
                    return Err(bad(format!("scene {}: pools needs three counts", id)));
                }
                let spec = SceneSpec {
                    id: id.to_string(),
                    degradation: parse_degradation(need("degradation")?)
                        .ok_or_else(|| bad(format!("scene {}: bad degradation", id)))?,
                    noise: parse_noise(need("noise")?).ok_or_else(|| bad(format!("scene {}: bad noise", id)))?,
                    paired: bool_of("paired")?,
                    learnable: bool_of("learnable")?,
                    pools: (pools[0], pools[1], pools[2]),
                };
                spec.validate().map_err(|e| bad(e.to_string()))?;
                if bool_of("noisy")? != spec.is_noisy() {
                    return Err(bad(format!("scene {}: noisy flag disagrees with noise model", id)));
                }
                scenes.push(spec);
            } else {
                seed = get("seed").and_then(|v| v.parse().ok()).or(seed);
                scale = get("scale").and_then(Scale::parse).or(scale);
                size = get("size").and_then(|v| v.parse().ok()).or(size);
            }
        }
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != 4 && rec.len() != 5 {
                return Err(bad(format!("row with {} fields", rec.len())));
            }
            let scene = rec[0].to_string();
            let spec = scenes
                .iter()
                .find(|s| s.id == scene)
                .ok_or_else(|| bad(format!("row for undeclared scene {}", scene)))?;
            let row = ManifestRow {
                pool: Pool::parse(&rec[1]).ok_or_else(|| bad(format!("unknown split `{}`", &rec[1])))?,
                index: rec[2].parse().map_err(|_| bad(format!("bad index `{}`", &rec[2])))?,
                low: PathBuf::from(&rec[3]),
                gt: rec.get(4).map(PathBuf::from),
                scene,
            };
            if row.gt.is_some() != spec.paired {
                return Err(bad(format!("row {} {} {}: ground truth presence disagrees with scene", row.scene, row.pool.name(), row.index)));
            }
            rows.push(row);
        }
        Ok(Manifest {
            seed: seed.ok_or_else(|| bad(String::from("header lacks seed")))?,
            scale: scale.ok_or_else(|| bad(String::from("header lacks scale")))?,
            size: size.ok_or_else(|| bad(String::from("header lacks size")))?,
            scenes,
            rows,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CliError::Missing {
                what: "dataset manifest",
                path: path.to_path_buf(),
                hint: "run `bladapt gen` first",
            });
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn scene(&self, id: &str) -> Result<&SceneSpec> {
        self.scenes
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| CliError::Validation(format!("scene `{}` is not in the manifest", id)))
    }

    /// Load one scene's images, relative to `root`.
    pub fn load_scene<S: Scalar>(&self, root: &Path, id: &str) -> Result<SceneDataset<S>> {
        let spec = self.scene(id)?.clone();
        let mut pools: [Vec<ScenePair<S>>; 3] = Default::default();
        for r in self.rows.iter().filter(|r| r.scene == id) {
            let gt = match &r.gt {
                Some(p) => Some(load_image(&root.join(p))?),
                None => None,
            };
            let slot = Pool::ALL.iter().position(|&p| p == r.pool).unwrap_or(0);
            pools[slot].push(ScenePair {
                scene: r.scene.clone(),
                pool: r.pool,
                index: r.index,
                low: load_image(&root.join(&r.low))?,
                gt,
                noise_seed: pair_seeds(self.seed, id, r.pool, r.index).1,
            });
        }
        for p in pools.iter_mut() {
            p.sort_by_key(|q| q.index);
        }
        let [learn, adapt, test] = pools;
        Ok(SceneDataset {
            spec,
            learn: Split::from_pool(learn),
            adapt: Split::from_pool(adapt),
            test,
        })
    }
}
