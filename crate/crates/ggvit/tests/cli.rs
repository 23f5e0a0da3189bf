use std::fs;

use ggvit::cli::run;

fn ggvit(args: &[&str]) -> i32 {
    run(std::iter::once("ggvit").chain(args.iter().copied()))
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(ggvit(&[]), 2);
    assert_eq!(ggvit(&["frobnicate"]), 2);
    assert_eq!(ggvit(&["synth"]), 2);
    assert_eq!(ggvit(&["train", "--manifest", "m.jsonl", "--out", "o", "--epochs", "many"]), 2);
}

#[test]
fn help_exits_with_0() {
    assert_eq!(ggvit(&["--help"]), 0);
    assert_eq!(ggvit(&["train", "--help"]), 0);
}

#[test]
fn validation_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.jsonl");
    let out = dir.path().join("out");
    let m = manifest.to_str().unwrap();
    let o = out.to_str().unwrap();

    fs::write(&manifest, "{\"path\":\"a.png\",\"label\":3,\"quality\":0,\"split\":\"train\"}\n").unwrap();
    assert_eq!(ggvit(&["train", "--manifest", m, "--out", o]), 1);
    fs::write(&manifest, "not json\n").unwrap();
    assert_eq!(ggvit(&["train-quality", "--manifest", m, "--out", o]), 1);
    fs::write(&manifest, "{\"path\":\"missing.png\",\"label\":0,\"quality\":0,\"split\":\"train\"}\n").unwrap();
    assert_eq!(ggvit(&["eval", "--ckpt", o, "--manifest", m, "--out", o]), 1);

    let synth = dir.path().join("synth");
    let s = synth.to_str().unwrap();
    assert_eq!(ggvit(&["synth", "--out", s, "--set", "no_such_key=1"]), 1);
    assert_eq!(ggvit(&["synth", "--out", s, "--set", "missing_equals"]), 1);
    assert_eq!(ggvit(&["synth", "--out", s, "--side", "40", "--set", "patch_max=30"]), 1);
    assert_eq!(ggvit(&["train", "--manifest", m, "--out", o, "--lambda=-1"]), 1);
    assert_eq!(ggvit(&["train", "--manifest", m, "--out", o, "--variant", "bogus"]), 1);
    assert_eq!(ggvit(&["matrix", "--ckpts", "a,b", "--tests", "q0,q7", "--manifest", m, "--out", o]), 1);
}

#[test]
fn settings_file_and_overrides_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.cfg");
    fs::write(&cfg, "# small corpus\nside = 48\ntrain_pairs = 1\nval_pairs = 1\ntest_pairs = 1\npatch_min = 8\npatch_max = 12\n").unwrap();
    let out = dir.path().join("corpus");
    let args = ["synth", "--out", out.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--set", "seed=11", "--test-pairs", "2"];
    assert_eq!(ggvit(&args), 0);
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["side"], 48);
    assert_eq!(resolved["seed"], 11);
    assert_eq!(resolved["test_pairs"], 2);
    let run_info: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run_info["command"], "synth");
    assert_eq!(run_info["seed"], 11);
    let lines = fs::read_to_string(out.join("manifest.jsonl")).unwrap().lines().count();
    assert_eq!(lines, (1 + 1 + 2) * 2 * 3);
}
