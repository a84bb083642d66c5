use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ngso_bf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ngso-bf")).args(args).env("NGSO_BF_THREADS", "1").output().unwrap()
}

fn small_configs(dir: &Path) -> (String, String) {
    let sc = dir.join("scenario.toml");
    let tc = dir.join("train.toml");
    std::fs::write(&sc, "[array]\nmx = 4\nmy = 4\n").unwrap();
    std::fs::write(&tc, "n_train = 8\nn_test = 4\nbatch = 4\nepochs = 1\nsnapshots = 16\n[model]\nm_z = 8\nhidden = 8\n").unwrap();
    (sc.to_string_lossy().into_owned(), tc.to_string_lossy().into_owned())
}

#[test]
fn zf_pattern_nulls_every_interferer() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let res = ngso_bf(&["beam-pattern", "--method", "zf", "--grid-step", "2", "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let markers: Value = serde_json::from_slice(&std::fs::read(out.join("pattern_markers.json")).unwrap()).unwrap();
    let depths = markers["null_depth_db"]["zf"].as_array().unwrap();
    assert_eq!(depths.len(), markers["interferer_doas"].as_array().unwrap().len());
    assert!(!depths.is_empty());
    for d in depths {
        let d = d.as_f64().unwrap();
        assert!(d <= -60.0, "null depth {d} dB");
    }
    let csv = std::fs::read_to_string(out.join("pattern_zf.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with('#') && l.contains("seed")));
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let res = ngso_bf(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows.len() >= 3);
    for row in &rows[1..] {
        let err: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!(err < 1e-4, "{row}");
    }
}

#[test]
fn eval_without_checkpoint_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (sc, tc) = small_configs(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let res = ngso_bf(&["eval", "--config", &sc, "--train-config", &tc, "--method", "all", "--out", out.to_str().unwrap()]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        (std::fs::read(out.join("eval_perfect.csv")).unwrap(), std::fs::read(out.join("eval_imperfect.csv")).unwrap())
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let text = String::from_utf8(a.0).unwrap();
    assert!(text.lines().any(|l| l.starts_with('#') && l.contains("seed")));
}

#[test]
fn seed_override_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let (sc, tc) = small_configs(dir.path());
    let run = |seed: &str| {
        let out = dir.path().join(seed);
        let res = ngso_bf(&["gen-data", "--config", &sc, "--train-config", &tc, "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        std::fs::read(out.join("manifest.json")).unwrap()
    };
    assert_ne!(run("1"), run("2"));
}

#[test]
fn train_then_eval_mamba() {
    let dir = tempfile::tempdir().unwrap();
    let (sc, tc) = small_configs(dir.path());
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    let res = ngso_bf(&["train", "--config", &sc, "--train-config", &tc, "--out", o]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().filter(|l| !l.starts_with('#')).count(), 2);
    let ck = out.join("checkpoint.json");
    let res = ngso_bf(&[
        "eval", "--config", &sc, "--train-config", &tc, "--checkpoint", ck.to_str().unwrap(), "--method", "mamba", "--csi",
        "imperfect", "--out", o,
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(std::fs::read_to_string(out.join("eval_imperfect.csv")).unwrap().contains("mamba"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ngso_bf(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(ngso_bf(&["--help"]).status.code(), Some(0));
    let missing = dir.path().join("missing.toml");
    assert_eq!(ngso_bf(&["gen-data", "--config", missing.to_str().unwrap()]).status.code(), Some(3));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[array]\nmx = 0\n").unwrap();
    let res = ngso_bf(&["gen-data", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    let res = ngso_bf(&["eval", "--method", "mamba", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
}
