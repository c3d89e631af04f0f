use std::collections::BTreeSet;
use std::time::Instant;

use bladapt_core::gradcheck::{check_gradient, run_all, standard_cases, GradCheckConfig};
use bladapt_core::{ParamSet, Tensor};

#[test]
fn every_standard_check_passes() {
    let start = Instant::now();
    let results = run_all(0, &GradCheckConfig::default()).unwrap();
    let names: BTreeSet<&str> = results.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names.len(), results.len());
    for required in ["conv2d", "batchnorm2d_train", "maxpool2d", "div", "supervised_loss", "unsupervised_loss", "adaptive_denoise_loss", "pipeline_supervised", "pipeline_unsupervised"] {
        assert!(names.contains(required), "missing check {required}");
    }
    for r in &results {
        assert!(r.passed, "{} failed: {:.3e} at {}", r.name, r.max_rel_error, r.worst);
        assert!(r.coordinates > 0);
    }
    assert!(start.elapsed().as_secs() < 120);
}

#[test]
fn cases_are_reproducible() {
    let a = standard_cases(3);
    let b = standard_cases(3);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.name, y.name);
        assert_eq!(x.point, y.point);
    }
}

#[test]
fn corrupted_gradient_is_reported_by_coordinate() {
    let point: ParamSet<f64> = [("w".to_string(), Tensor::new([3], vec![0.2, -0.4, 0.9]).unwrap())].into_iter().collect();
    let f = |p: &ParamSet<f64>| Ok(p.require("w")?.data().iter().map(|v| v.sin()).sum::<f64>());
    let cfg = GradCheckConfig::default();

    let exact: ParamSet<f64> = [("w".to_string(), point.require("w").unwrap().map(f64::cos))].into_iter().collect();
    assert!(check_gradient("sin", &point, &exact, f, &cfg).unwrap().passed);

    let mut wrong = exact.clone();
    wrong.get_mut("w").unwrap().data_mut()[2] *= 1.001;
    let r = check_gradient("sin", &point, &wrong, f, &cfg).unwrap();
    assert!(!r.passed);
    assert_eq!(r.worst, "w[2]");
    assert!((r.max_rel_error - 1e-3 / 1.001).abs() < 1e-6);
}
