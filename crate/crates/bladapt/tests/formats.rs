use std::path::Path;

use bladapt::checkpoint::{decode, encode, load, save};
use bladapt::image_io::{load_image, save_image};
use bladapt::manifest::Manifest;
use bladapt::CliError;
use bladapt_core::data::{build_benchmark, Scale};
use bladapt_core::{ParamSet, Tensor};
use proptest::prelude::*;

fn params(shapes: &[Vec<usize>], fill: f64) -> ParamSet<f64> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let n: usize = s.iter().product();
            (format!("layer{i}.w"), Tensor::from_fn(s.clone(), |j| fill * (j as f64 + 1.0) / (n as f64 + 1.0) - 0.3 * i as f64))
        })
        .collect()
}

fn shapes() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 0..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_round_trips_bit_exact(s in shapes(), fill in -10.0f64..10.0) {
        let p = params(&s, fill);
        let bytes = encode(&p).unwrap();
        let back: ParamSet<f64> = decode(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.checksum(), p.checksum());
        prop_assert_eq!(back, p);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(s in shapes(), cut in 0usize..1000) {
        let bytes = encode(&params(&s, 1.0)).unwrap();
        let cut = cut % bytes.len();
        let err = decode::<f64>(&bytes[..cut], Path::new("mem")).unwrap_err();
        prop_assert!(matches!(err, CliError::Format { .. }), "{err}");
    }
}

#[test]
fn checkpoint_header_and_corruptions() {
    let p = params(&[vec![2, 3], vec![4]], 1.0);
    let mut bytes = encode(&p).unwrap();
    assert_eq!(&bytes[..4], b"BLAD");
    assert_eq!(&bytes[4..6], &1u16.to_le_bytes());
    assert_eq!(&bytes[6..10], &2u32.to_le_bytes());

    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode::<f64>(&extra, Path::new("x")), Err(CliError::Format { .. })));

    bytes[0] = b'X';
    let err = decode::<f64>(&bytes, Path::new("x")).unwrap_err();
    assert!(err.to_string().contains("bad magic"));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn checkpoints_convert_between_precisions() {
    let p = params(&[vec![3, 3]], 0.5);
    let single: ParamSet<f32> = decode(&encode(&p).unwrap(), Path::new("m")).unwrap();
    for ((_, a), (_, b)) in single.iter().zip(p.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32);
        }
    }
}

#[test]
fn checkpoint_files_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.blad");
    let p = params(&[vec![5]], 2.0);
    save(&path, &p).unwrap();
    let back: ParamSet<f64> = load(&path, "checkpoint", "make one").unwrap();
    assert_eq!(back, p);
    let err = load::<f64>(&dir.path().join("none.blad"), "checkpoint", "make one").unwrap_err();
    assert!(matches!(err, CliError::Missing { .. }));
    assert!(err.to_string().contains("none.blad") && err.to_string().contains("make one"));
}

#[test]
fn quantized_images_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::<f64>::from_fn([3, 5, 7], |i| ((i * 37) % 256) as f64 / 255.0);
    for ext in ["png", "ppm"] {
        let path = dir.path().join(format!("q.{ext}"));
        save_image(&path, &t).unwrap();
        assert_eq!(load_image::<f64>(&path).unwrap(), t);
    }
}

#[test]
fn random_images_round_trip_within_one_level() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.png");
    let t = Tensor::<f64>::from_fn([3, 9, 6], |i| (i as f64 * 0.618_033_988_7).fract());
    save_image(&path, &t).unwrap();
    let back = load_image::<f64>(&path).unwrap();
    let worst = t.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 0.5 / 255.0 + 1e-12, "{worst}");
}

#[test]
fn ppm_with_known_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.ppm");
    let mut bytes = b"P6\n2 2\n255\n".to_vec();
    bytes.extend_from_slice(&[0, 51, 255, 102, 153, 204, 255, 0, 0, 1, 2, 3]);
    std::fs::write(&path, bytes).unwrap();
    let t = load_image::<f64>(&path).unwrap();
    assert_eq!(t.shape(), &[3, 2, 2]);
    let expect = [0.0, 102.0, 255.0, 1.0, 51.0, 153.0, 0.0, 2.0, 255.0, 204.0, 0.0, 3.0];
    for (a, e) in t.data().iter().zip(expect) {
        assert_eq!(*a, e / 255.0);
    }
}

#[test]
fn bad_images_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let trunc = dir.path().join("t.ppm");
    std::fs::write(&trunc, b"P6\n4 4\n255\n\x01\x02").unwrap();
    assert!(matches!(load_image::<f64>(&trunc), Err(CliError::Format { .. })));
    let junk = dir.path().join("j.png");
    std::fs::write(&junk, b"not an image").unwrap();
    assert!(matches!(load_image::<f64>(&junk), Err(CliError::Format { .. })));
    assert!(matches!(load_image::<f64>(&dir.path().join("nope.png")), Err(CliError::Missing { .. })));
    assert!(save_image(&dir.path().join("x.png"), &Tensor::<f64>::zeros([2, 2, 2])).is_err());
}

#[test]
fn manifest_round_trip() {
    let data = build_benchmark::<f64>(3, Scale::Tiny, 16).unwrap();
    let m = Manifest::for_datasets(3, Scale::Tiny, 16, &data);
    assert_eq!(m.rows.len(), 550);
    assert_eq!(m.rows.iter().filter(|r| r.gt.is_none()).count(), 110);
    let text = m.to_text().unwrap();
    assert!(text.starts_with("# bladapt manifest v1\n# seed=3 scale=tiny size=16\n"));
    assert!(text.contains("\nC,test,3,data/C/test/0003_low.png,data/C/test/0003_gt.png\n"));
    let back = Manifest::parse(&text, Path::new("m.csv")).unwrap();
    assert_eq!(back, m);

    let broken = text.replace("E,test,0,data/E/test/0000_low.png", "E,test,0,data/E/test/0000_low.png,gt.png");
    assert!(Manifest::parse(&broken, Path::new("m.csv")).is_err());
    assert!(Manifest::parse(&text.replacen("# bladapt", "# other", 1), Path::new("m.csv")).is_err());
    assert!(Manifest::parse(&text.replace("pools=50/50/10", "pools=50/50"), Path::new("m.csv")).is_err());
}
