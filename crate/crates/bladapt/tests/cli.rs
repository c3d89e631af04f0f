use std::path::Path;
use std::process::Command as Process;

use bladapt::commands::{oracle_rows, run, Layout, ORACLE_EPS};
use bladapt::config::KEYS;
use bladapt::{CliError, Command, RunConfig};
use bladapt_core::phase::Mode;

fn config(workdir: &Path, extra: &str) -> RunConfig {
    let text = format!(
        "workdir={}\nimage_size=16\nlearn_epochs=1\nadapt_epochs=1\nbatch_size=8\nlog_time=false\n{}",
        workdir.display(),
        extra
    );
    RunConfig::parse(&text).unwrap()
}

fn go(cmd: Command, cfg: &RunConfig) -> Result<String, CliError> {
    let mut out = Vec::new();
    run(cmd, cfg, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn pipeline_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let bl = config(dir.path(), "");
    let layout = Layout::new(&bl);

    let missing = go(Command::Learn, &bl).unwrap_err();
    assert!(matches!(missing, CliError::Missing { .. }));
    assert!(missing.to_string().contains("bladapt gen"));

    assert!(go(Command::Gen, &bl).unwrap().contains("550 images"));
    assert!(dir.path().join("data/E/test/0009_low.png").exists());
    assert!(!dir.path().join("data/E/test/0009_gt.png").exists());

    let err = go(Command::Adapt, &bl).unwrap_err();
    assert!(matches!(err, CliError::Missing { .. }) && err.to_string().contains("learn"));
    let err = go(Command::Test, &bl).unwrap_err();
    assert!(matches!(err, CliError::Missing { .. }) && err.to_string().contains("adapt"));

    go(Command::Learn, &bl).unwrap();
    let log = read(&layout.learn_log(Mode::Bl));
    assert_eq!(log.lines().next(), Some("phase,epoch,split,loss,psnr,seconds"));
    assert_eq!(log.lines().count(), 3);

    go(Command::Adapt, &bl).unwrap();
    assert!(read(&layout.adapt_summary("C", Mode::Bl)).contains("encoder_frozen=pass"));
    let adapt_log = read(&layout.adapt_log("C", Mode::Bl));
    assert!(adapt_log.contains("\nadapt,0,val,"));

    go(Command::Test, &bl).unwrap();
    let report = read(&layout.test_report("C", Mode::Bl));
    assert_eq!(report.lines().count(), 1 + 10 + 1);
    assert!(report.contains("\nC-test-0000,"));
    let dumps = layout.dump_dir("C", Mode::Bl);
    for part in ["input", "illumination", "reflectance", "noise", "output"] {
        assert!(dumps.join(format!("C-test-0004_{part}.png")).exists(), "{part}");
    }

    // naive adaptation needs no learned checkpoint and logs its curve
    let naive = config(dir.path(), "mode=naive\n");
    go(Command::Adapt, &naive).unwrap();
    assert!(read(&layout.adapt_summary("C", Mode::Naive)).contains("encoder_frozen=not applicable"));
    assert!(layout.adapt_log("C", Mode::Naive).exists());
    assert!(matches!(go(Command::Learn, &naive), Err(CliError::Validation(_))));

    // RBL on the unpaired scene: metrics without ground truth
    let rbl = config(dir.path(), "mode=RBL\nscene=E\ndump_images=false\n");
    go(Command::Learn, &rbl).unwrap();
    go(Command::Adapt, &rbl).unwrap();
    go(Command::Test, &rbl).unwrap();
    let report = read(&layout.test_report("E", Mode::Rbl));
    assert!(report.lines().nth(1).unwrap().starts_with("E-test-0000,nan,nan,"));

    let unknown = config(dir.path(), "scene=Q\n");
    assert!(matches!(go(Command::Adapt, &unknown), Err(CliError::Validation(_))));
}

#[test]
fn oracle_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let printed = go(Command::Oracle, &cfg).unwrap();
    assert!(printed.lines().count() > 100);
    let csv = read(&Layout::new(&cfg).oracle_report());
    assert!(csv.starts_with("kind,u,xi,eps,approx,exact,gap\n"));

    let rows = oracle_rows().unwrap();
    assert_eq!(rows.len(), 2 * 5 * 4 * 4);
    for r in &rows {
        if r.xi == 0.0 {
            // no direct dependence of F on u
            assert_eq!(r.approx, 0.0);
        }
        if r.xi == 0.5 {
            assert!(r.gap().abs() < 1e-9, "{r:?}");
        }
    }
    let two = rows.iter().find(|r| r.kind == "BL" && r.u == 2.0 && r.xi == 0.5 && r.eps == 1e-2).unwrap();
    assert!((two.approx - 2.0).abs() < 1e-9 && two.exact == 2.0);
    for chunk in rows.chunks(ORACLE_EPS.len()) {
        let g0 = chunk[0].gap();
        assert!(chunk.iter().all(|r| (r.gap() - g0).abs() < 1e-8), "{chunk:?}");
    }
}

#[test]
fn config_round_trip_and_rejections() {
    let cfg = RunConfig::parse("seed=4\nmode=RBL\nxi=0.01\nfd_epsilon=fixed:0.001\n# note\n").unwrap();
    let canonical = cfg.to_canonical();
    assert_eq!(canonical.lines().count(), KEYS.len());
    assert_eq!(RunConfig::parse(&canonical).unwrap(), cfg);
    assert_eq!(RunConfig::parse(&canonical).unwrap().to_canonical(), canonical);
    for bad in ["colour=red\n", "seed=1\nseed=2\n", "image_size=20\n", "mode=fast\n", "seed\n", "xi=-1\n"] {
        let err = RunConfig::parse(bad).unwrap_err();
        assert_eq!(err.exit_code(), 1, "{bad}");
    }
}

fn bladapt(args: &[&str]) -> (i32, String) {
    let out = Process::new(env!("CARGO_BIN_EXE_bladapt")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "image_size=16\n").unwrap();
    let work = dir.path().join("w");
    let (cfg_s, work_s) = (cfg.to_str().unwrap(), work.to_str().unwrap());

    let (code, err) = bladapt(&["learn", "--config", cfg_s, "--workdir", work_s]);
    assert_eq!(code, 2);
    assert!(err.contains("bladapt gen"), "{err}");

    let (code, _) = bladapt(&["learn", "--config", cfg_s, "--workdir", work_s, "--mode", "naive"]);
    assert_eq!(code, 1);

    let (code, _) = bladapt(&["oracle", "--config", cfg_s, "--workdir", work_s, "--seed", "3"]);
    assert_eq!(code, 0);
    assert!(work.join("reports/oracle.csv").exists());

    std::fs::write(&cfg, "bogus=1\n").unwrap();
    let (code, err) = bladapt(&["oracle", "--config", cfg_s]);
    assert_eq!(code, 1);
    assert!(err.contains("bogus"));

    let (code, _) = bladapt(&["oracle", "--config", dir.path().join("absent.cfg").to_str().unwrap()]);
    assert_eq!(code, 2);
}
