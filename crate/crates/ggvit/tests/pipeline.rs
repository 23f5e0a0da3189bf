use std::fs;
use std::path::{Path, PathBuf};

use ggvit::cli::run;
use ggvit::data::{self, Split};
use ggvit::io::hash_dir;
use ggvit::trainer::{self, Prepared};

fn ggvit(args: &[&str]) -> i32 {
    run(std::iter::once("ggvit").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small corpus plus a quickly trained quality classifier.
fn fixture(root: &Path) -> (PathBuf, PathBuf) {
    let corpus = root.join("corpus");
    let code = ggvit(&[
        "synth", "--out", s(&corpus), "--side", "48", "--train-pairs", "3", "--val-pairs", "1", "--test-pairs", "2",
        "--set", "patch_min=8", "--set", "patch_max=12",
    ]);
    assert_eq!(code, 0);
    let quality = root.join("quality");
    assert_eq!(ggvit(&["train-quality", "--manifest", s(&corpus.join("manifest.jsonl")), "--out", s(&quality), "--epochs", "1"]), 0);
    (corpus.join("manifest.jsonl"), quality)
}

fn train(manifest: &Path, quality: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--manifest", s(manifest), "--quality", s(quality), "--out", s(out), "--epochs", "1", "--dtype", "f64"];
    args.extend_from_slice(extra);
    assert_eq!(ggvit(&args), 0);
}

#[test]
fn runs_with_the_same_seed_produce_identical_outputs() {
    let root = tempfile::tempdir().unwrap();
    let (manifest, quality) = fixture(root.path());
    let out = root.path().join("run");

    train(&manifest, &quality, &out, &[]);
    let first = hash_dir(&out).unwrap();
    let log = fs::read_to_string(out.join("log.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "l_vit", "l_lmc", "l_fusion", "total", "clamp_count"] {
        assert!(line.get(key).is_some(), "log line lacks {key}");
    }
    fs::remove_dir_all(&out).unwrap();
    train(&manifest, &quality, &out, &[]);
    assert_eq!(hash_dir(&out).unwrap(), first);

    let other = root.path().join("other");
    train(&manifest, &quality, &other, &["--seed", "1"]);
    assert_ne!(hash_dir(&other.join("checkpoint")).unwrap(), hash_dir(&out.join("checkpoint")).unwrap());

    let ev = root.path().join("eval");
    for _ in 0..2 {
        let _ = fs::remove_dir_all(&ev);
        assert_eq!(ggvit(&["eval", "--ckpt", s(&out), "--manifest", s(&manifest), "--out", s(&ev), "--split", "test"]), 0);
    }
    let ev_hash = hash_dir(&ev).unwrap();
    fs::remove_dir_all(&ev).unwrap();
    assert_eq!(ggvit(&["eval", "--ckpt", s(&out), "--manifest", s(&manifest), "--out", s(&ev), "--split", "test"]), 0);
    assert_eq!(hash_dir(&ev).unwrap(), ev_hash);
    assert_eq!(fs::read_to_string(ev.join("predictions.csv")).unwrap().lines().count(), 1 + 12);

    let wrong = root.path().join("wrong");
    assert_eq!(ggvit(&["eval", "--ckpt", s(&out), "--manifest", s(&manifest), "--out", s(&wrong), "--preset", "base"]), 1);

    let props = root.path().join("props");
    assert_eq!(ggvit(&["proportions", "--ckpt", s(&out), "--manifest", s(&manifest), "--out", s(&props), "--split", "test"]), 0);
    let csv = fs::read_to_string(props.join("proportions.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "model,X0,X1,X2,X3,X4");
    for row in lines {
        let total: f64 = row.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 100.0).abs() < 0.1, "{row}");
    }

    let matrix = root.path().join("matrix");
    let ck = s(&out);
    let ckpts = format!("{ck},{ck},{ck}");
    let args = ["matrix", "--ckpts", &ckpts, "--tests", "q0,q1,q2", "--manifest", s(&manifest), "--out", s(&matrix), "--split", "test"];
    assert_eq!(ggvit(&args), 0);
    let m = trainer::EvalMatrix::from_csv(&fs::read_to_string(matrix.join("matrix.csv")).unwrap()).unwrap();
    assert_eq!(m.accuracy.len(), 3);
    assert!(m.accuracy.iter().all(|r| r.len() == 3));
    // one checkpoint evaluated on the same test set gives identical rows
    assert_eq!(m.accuracy[0], m.accuracy[1]);

    let missing = root.path().join("nope");
    let ckpts = format!("{ck},{},{ck}", s(&missing));
    let bad = root.path().join("bad");
    let args = ["matrix", "--ckpts", &ckpts, "--tests", "q0,q1,q2", "--manifest", s(&manifest), "--out", s(&bad)];
    assert_eq!(ggvit(&args), 1);

    let report = root.path().join("report");
    let (mcsv, pcsv) = (matrix.join("matrix.csv"), props.join("proportions.csv"));
    let args = ["report", "--matrix", s(&mcsv), "--proportions", s(&pcsv), "--out", s(&report)];
    assert_eq!(ggvit(&args), 0);
    assert!(fs::read_to_string(report.join("matrix.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn evaluation_does_not_depend_on_thread_count() {
    let root = tempfile::tempdir().unwrap();
    let (manifest, quality) = fixture(root.path());
    let out = root.path().join("run");
    train(&manifest, &quality, &out, &["--variant", "full"]);
    let det = trainer::load_detector::<f64>(&out.join("checkpoint")).unwrap();
    let samples = data::select(&data::load_manifest(&manifest).unwrap(), Split::Test, None);
    let mut test = Prepared::<f64>::load(&samples, det.model.config.vit.image_size).unwrap();
    test.score(det.quality.as_ref().unwrap()).unwrap();
    let one = trainer::evaluate(&det.model, &test, 1).unwrap();
    let many = trainer::evaluate(&det.model, &test, 3).unwrap();
    assert_eq!(one, many);
    assert_eq!(one.fusion.len(), test.len());
}

#[test]
fn accuracy_of_perfect_and_coin_flip_predictors() {
    let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
    assert_eq!(trainer::accuracy(&labels, &labels).unwrap(), 100.0);
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let coin: Vec<usize> = labels.iter().map(|_| rng.random_range(0..2)).collect();
    let acc = trainer::accuracy(&coin, &labels).unwrap();
    // four binomial standard deviations of 2.5 points
    assert!((acc - 50.0).abs() < 10.0, "{acc}");
    assert!(trainer::accuracy(&[], &[]).is_err());
}
