//! The six subcommands. Each writes its artifacts under the workdir and
//! prints a short summary to `out`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bladapt_core::bilevel::toy::{exact_quadratic_hypergradient, lower_proximal, scalar_of, scalar_set, upper_quadratic};
use bladapt_core::bilevel::{bl_hypergradient, rbl_hypergradient, FdEpsilon};
use bladapt_core::data::build_benchmark;
use bladapt_core::gradcheck::{run_all, CheckResult, GradCheckConfig};
use bladapt_core::net::{EnhanceNet, NetConfig};
use bladapt_core::phase::{adapt_phase, learn_phase, records_csv, test_phase, Clock, Mode, Model, NoClock, PhaseRecord};
use bladapt_core::{ParamSet, Tensor};

use crate::checkpoint;
use crate::config::{Command, RunConfig};
use crate::error::{CliError, Result};
use crate::image_io::save_image;
use crate::manifest::Manifest;

/// Training precision of the CLI.
pub type Real = f32;

pub struct WallClock(Instant);

impl WallClock {
    pub fn start() -> Self {
        WallClock(Instant::now())
    }
}

impl Clock for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Where every artifact of a run lives.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Layout {
            root: cfg.workdir.clone(),
            checkpoints: cfg.workdir.join(&cfg.checkpoint_dir),
            reports: cfg.workdir.join(&cfg.report_dir),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("data").join("manifest.csv")
    }

    pub fn learn_checkpoint(&self, mode: Mode) -> PathBuf {
        self.checkpoints.join(format!("learn_{}.blad", mode.name()))
    }

    pub fn adapt_checkpoint(&self, scene: &str, mode: Mode) -> PathBuf {
        self.checkpoints.join(format!("adapt_{}_{}.blad", scene, mode.name()))
    }

    pub fn learn_log(&self, mode: Mode) -> PathBuf {
        self.root.join("logs").join(format!("learn_{}.csv", mode.name()))
    }

    pub fn adapt_log(&self, scene: &str, mode: Mode) -> PathBuf {
        self.root.join("logs").join(format!("adapt_{}_{}.csv", scene, mode.name()))
    }

    pub fn adapt_summary(&self, scene: &str, mode: Mode) -> PathBuf {
        self.root.join("logs").join(format!("adapt_{}_{}.txt", scene, mode.name()))
    }

    pub fn test_report(&self, scene: &str, mode: Mode) -> PathBuf {
        self.reports.join(format!("test_{}_{}.csv", scene, mode.name()))
    }

    pub fn gradcheck_report(&self) -> PathBuf {
        self.reports.join("gradcheck.csv")
    }

    pub fn oracle_report(&self) -> PathBuf {
        self.reports.join("oracle.csv")
    }

    pub fn dump_dir(&self, scene: &str, mode: Mode) -> PathBuf {
        self.root.join("dumps").join(format!("{}_{}", scene, mode.name()))
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn say(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{}", line).map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

pub fn network() -> EnhanceNet {
    EnhanceNet::new(NetConfig::default())
}

fn clock(cfg: &RunConfig) -> Box<dyn Clock> {
    if cfg.log_time {
        Box::new(WallClock::start())
    } else {
        Box::new(NoClock)
    }
}

pub fn run(cmd: Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    match cmd {
        Command::Gen => cmd_gen(cfg, out),
        Command::Learn => cmd_learn(cfg, out),
        Command::Adapt => cmd_adapt(cfg, out),
        Command::Test => cmd_test(cfg, out),
        Command::Gradcheck => cmd_gradcheck(cfg, out),
        Command::Oracle => cmd_oracle(cfg, out),
    }
}

// ------------------------------------------------------------------- gen

pub fn cmd_gen(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let layout = Layout::new(cfg);
    let datasets = build_benchmark::<f64>(cfg.seed, cfg.scale, cfg.image_size)?;
    let manifest = Manifest::for_datasets(cfg.seed, cfg.scale, cfg.image_size, &datasets);
    let mut pairs = datasets.iter().flat_map(|d| d.all_pairs());
    for row in &manifest.rows {
        let p = pairs.next().expect("one pair per manifest row");
        save_image(&layout.root.join(&row.low), &p.low)?;
        if let (Some(path), Some(gt)) = (&row.gt, &p.gt) {
            save_image(&layout.root.join(path), gt)?;
        }
    }
    write_text(&layout.manifest(), &manifest.to_text()?)?;
    say(
        out,
        &format!(
            "gen: {} scenes, {} images, manifest {}",
            manifest.scenes.len(),
            manifest.rows.len(),
            layout.manifest().display()
        ),
    )
}

// ----------------------------------------------------------------- learn

pub fn cmd_learn(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    if cfg.mode == Mode::Naive {
        return Err(CliError::Validation(String::from(
            "learn runs in BL or RBL mode; naive training from scratch is `adapt --mode naive`",
        )));
    }
    let layout = Layout::new(cfg);
    let manifest = Manifest::read(&layout.manifest())?;
    let ids: Vec<String> = manifest.scenes.iter().filter(|s| s.learnable).map(|s| s.id.clone()).collect();
    let datasets = ids
        .iter()
        .map(|id| manifest.load_scene::<Real>(&layout.root, id))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = datasets.iter().collect();
    let net = network();
    let outcome = learn_phase(&net, &refs, cfg.mode, &cfg.bilevel_config(), clock(cfg).as_ref())?;
    checkpoint::save(&layout.learn_checkpoint(cfg.mode), &outcome.model.to_set())?;
    write_text(&layout.learn_log(cfg.mode), &records_csv(&outcome.records))?;
    let last = last_val(&outcome.records);
    say(
        out,
        &format!(
            "learn {}: scenes {}, {} epochs, final val psnr {:.3}, checkpoint {}",
            cfg.mode.name(),
            ids.join("+"),
            cfg.bilevel.learn_epochs,
            last,
            layout.learn_checkpoint(cfg.mode).display()
        ),
    )
}

fn last_val(records: &[PhaseRecord]) -> f64 {
    records
        .iter()
        .rev()
        .find(|r| r.split == "val")
        .map(|r| r.psnr)
        .unwrap_or(f64::NAN)
}

/// The learned model a BL or RBL adaptation starts from; RBL starts its
/// decoder at the learned initialization.
pub fn starting_model(layout: &Layout, net: &EnhanceNet, mode: Mode, seed: u64) -> Result<Model<Real>> {
    if mode == Mode::Naive {
        return Ok(Model::init(net, seed));
    }
    let set: ParamSet<Real> = checkpoint::load(
        &layout.learn_checkpoint(mode),
        "learn checkpoint",
        "run `bladapt learn` with the same mode first",
    )?;
    let mut model = Model::from_set(&set)?;
    model.check_layout(net)?;
    if mode == Mode::Rbl {
        model.decoder = model.meta_init.clone().ok_or_else(|| {
            CliError::Validation(String::from("RBL checkpoint has no decoder initialization (meta_init.*)"))
        })?;
    }
    Ok(model)
}

// ----------------------------------------------------------------- adapt

pub fn cmd_adapt(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let layout = Layout::new(cfg);
    let manifest = Manifest::read(&layout.manifest())?;
    let dataset = manifest.load_scene::<Real>(&layout.root, &cfg.scene)?;
    let net = network();
    let start = starting_model(&layout, &net, cfg.mode, cfg.seed)?;
    let reference = start.encoder.checksum();
    let outcome = adapt_phase(
        &net,
        &start,
        &dataset,
        cfg.mode,
        cfg.use_denoiser,
        &cfg.bilevel_config(),
        clock(cfg).as_ref(),
    )?;
    let after = outcome.model.encoder.checksum();
    let frozen = reference == after;
    let verdict = match (cfg.mode, frozen) {
        (Mode::Naive, _) => "not applicable (naive trains the encoder)",
        (_, true) => "pass",
        (_, false) => "FAIL",
    };
    let summary = format!(
        "scene={}\nmode={}\nencoder_checksum_before={:016x}\nencoder_checksum_after={:016x}\nencoder_frozen={}\n",
        cfg.scene,
        cfg.mode.name(),
        reference,
        after,
        verdict
    );
    write_text(&layout.adapt_summary(&cfg.scene, cfg.mode), &summary)?;
    write_text(&layout.adapt_log(&cfg.scene, cfg.mode), &records_csv(&outcome.records))?;
    if cfg.mode != Mode::Naive && !frozen {
        return Err(CliError::Validation(String::from("encoder changed during adaptation")));
    }
    checkpoint::save(&layout.adapt_checkpoint(&cfg.scene, cfg.mode), &outcome.model.to_set())?;
    let first = outcome.records.iter().find(|r| r.split == "val").map(|r| r.psnr).unwrap_or(f64::NAN);
    say(
        out,
        &format!(
            "adapt {} on {}: val psnr {:.3} -> {:.3}, encoder frozen: {}",
            cfg.mode.name(),
            cfg.scene,
            first,
            last_val(&outcome.records),
            verdict
        ),
    )
}

// ------------------------------------------------------------------ test

/// Shift a signed noise map to mid grey for viewing.
pub fn noise_view(t: &Tensor<Real>) -> Tensor<Real> {
    t.map(|v| v + 0.5)
}

pub fn cmd_test(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let layout = Layout::new(cfg);
    let manifest = Manifest::read(&layout.manifest())?;
    let dataset = manifest.load_scene::<Real>(&layout.root, &cfg.scene)?;
    let net = network();
    let set: ParamSet<Real> = checkpoint::load(
        &layout.adapt_checkpoint(&cfg.scene, cfg.mode),
        "adapted checkpoint",
        "run `bladapt adapt` for this scene and mode first",
    )?;
    let model = Model::from_set(&set)?;
    model.check_layout(&net)?;
    let outcome = test_phase(&net, &model, cfg.use_denoiser, &dataset.test, cfg.bilevel.batch_size)?;
    let report = layout.test_report(&cfg.scene, cfg.mode);
    write_text(&report, &outcome.report.to_csv())?;
    if cfg.dump_images {
        let dir = layout.dump_dir(&cfg.scene, cfg.mode);
        for (p, o) in dataset.test.iter().zip(&outcome.outputs) {
            let id = p.id();
            save_image(&dir.join(format!("{}_input.png", id)), &p.low)?;
            save_image(&dir.join(format!("{}_illumination.png", id)), &o.illumination)?;
            save_image(&dir.join(format!("{}_reflectance.png", id)), &o.reflectance)?;
            save_image(&dir.join(format!("{}_noise.png", id)), &noise_view(&o.noise_map))?;
            save_image(&dir.join(format!("{}_output.png", id)), &o.output)?;
        }
    }
    say(
        out,
        &format!(
            "test {} on {}: {} images, psnr {:.3}, ssim {:.4}, de {:.3}, loe {:.1}, report {}",
            cfg.mode.name(),
            cfg.scene,
            outcome.report.len(),
            outcome.report.mean_psnr(),
            outcome.report.mean_ssim(),
            outcome.report.mean_de(),
            outcome.report.mean_loe(),
            report.display()
        ),
    )
}

// ------------------------------------------------------------- gradcheck

pub fn gradcheck_csv(results: &[CheckResult]) -> String {
    let mut s = String::from("name,max_rel_error,coordinates,refined,worst,passed\n");
    for r in results {
        s.push_str(&format!(
            "{},{:.3e},{},{},{},{}\n",
            r.name, r.max_rel_error, r.coordinates, r.refined, r.worst, r.passed
        ));
    }
    s
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let layout = Layout::new(cfg);
    let gc = GradCheckConfig::default();
    let results = run_all(cfg.seed, &gc)?;
    say(out, &format!("{:<28} {:>12} {:>8}  worst coordinate", "check", "max rel err", "result"))?;
    for r in &results {
        say(
            out,
            &format!(
                "{:<28} {:>12.3e} {:>8}  {}",
                r.name,
                r.max_rel_error,
                if r.passed { "pass" } else { "FAIL" },
                r.worst
            ),
        )?;
    }
    write_text(&layout.gradcheck_report(), &gradcheck_csv(&results))?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        say(out, &format!("gradcheck: all {} checks within {:e}", results.len(), gc.tol))
    } else {
        Err(CliError::Validation(format!("gradient check failed for {}", failed.join(", "))))
    }
}

// ---------------------------------------------------------------- oracle

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    /// `BL` or `RBL`.
    pub kind: &'static str,
    pub u: f64,
    pub xi: f64,
    pub eps: f64,
    pub approx: f64,
    pub exact: f64,
}

impl OracleRow {
    pub fn gap(&self) -> f64 {
        self.approx - self.exact
    }
}

/// Target of the upper quadratic `F = (v − a)²` in the oracle table.
pub const ORACLE_TARGET: f64 = 1.0;
pub const ORACLE_U: [f64; 5] = [-1.0, 0.0, 0.5, 2.0, 3.0];
pub const ORACLE_XI: [f64; 4] = [0.0, 0.25, 0.5, 1.0];
pub const ORACLE_EPS: [f64; 4] = [1e-6, 1e-4, 1e-2, 1e-1];

/// One-step hypergradients of the quadratic family `F = (v − a)²`,
/// `f = (v − u)²` at `v = u` against the exact `2(u − a)`. RBL rows use the
/// same family with the initialization in place of `u`.
pub fn oracle_rows() -> Result<Vec<OracleRow>> {
    let a = ORACLE_TARGET;
    let mut rows = Vec::new();
    for kind in ["BL", "RBL"] {
        for &u in &ORACLE_U {
            for &xi in &ORACLE_XI {
                for &eps in &ORACLE_EPS {
                    let fd = FdEpsilon::Fixed(eps);
                    let h = if kind == "BL" {
                        let (uu, v) = (scalar_set("u", u), scalar_set("v", u));
                        bl_hypergradient(&upper_quadratic(a), &lower_proximal(), &uu, &v, &(), &(), xi, fd)?
                    } else {
                        let (init, v) = (scalar_set("v", u), scalar_set("v", u));
                        rbl_hypergradient(&upper_quadratic(a), &lower_proximal(), &init, &v, &(), &(), xi, fd)?
                    };
                    rows.push(OracleRow {
                        kind,
                        u,
                        xi,
                        eps,
                        approx: scalar_of(&h.grad),
                        exact: exact_quadratic_hypergradient(u, a),
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn oracle_csv(rows: &[OracleRow]) -> String {
    let mut s = String::from("kind,u,xi,eps,approx,exact,gap\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:e},{:.12},{:.12},{:.3e}\n",
            r.kind,
            r.u,
            r.xi,
            r.eps,
            r.approx,
            r.exact,
            r.gap()
        ));
    }
    s
}

pub fn cmd_oracle(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let layout = Layout::new(cfg);
    let rows = oracle_rows()?;
    say(
        out,
        &format!(
            "{:<4} {:>5} {:>5} {:>7} {:>14} {:>14} {:>10}",
            "kind", "u", "xi", "eps", "approx", "exact", "gap"
        ),
    )?;
    for r in &rows {
        say(
            out,
            &format!(
                "{:<4} {:>5} {:>5} {:>7.0e} {:>14.10} {:>14.10} {:>10.2e}",
                r.kind,
                r.u,
                r.xi,
                r.eps,
                r.approx,
                r.exact,
                r.gap()
            ),
        )?;
    }
    write_text(&layout.oracle_report(), &oracle_csv(&rows))
}
