use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use tempfile::TempDir;

fn cib(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cib")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small vector bundle in a fresh directory.
fn small_bundle(dir: &TempDir) -> PathBuf {
    let out = dir.path().join("small.cibd");
    let o = cib(&["gen-data", "--out", s(&out), "--seed", "3", "--set", "train_size=240", "--set", "val_size=80", "--set", "test_size=80"]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

const QUICK: [&str; 8] = ["--epochs", "2", "--set", "n=2", "--set", "m=2", "--set", "batch_size=32"];

#[test]
fn every_command_has_help() {
    for cmd in ["gen-data", "train", "eval", "sweep", "verify-causal"] {
        let o = cib(&[cmd, "--help"]);
        assert!(o.status.success(), "{cmd}");
        assert!(stdout(&o).contains("Usage"), "{cmd}");
    }
    assert_eq!(cib(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn gen_data_writes_reloadable_deterministic_files() {
    let dir = TempDir::new().unwrap();
    let spec = configs().join("tiny.spec");
    let (a, b) = (dir.path().join("a.cibd"), dir.path().join("b.cibd"));
    for out in [&a, &b] {
        let o = cib(&["gen-data", "--spec", s(&spec), "--out", s(out), "--seed", "7"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("train=1000"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let bundle = cib_core::data::DatasetBundle::load(&a).unwrap();
    assert_eq!(bundle.train.len(), 1000);
}

#[test]
fn gen_data_rejects_bad_correlation() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.cibd");
    let o = cib(&["gen-data", "--out", s(&out), "--set", "train_correlation=1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train_correlation"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn default_config_trains_on_tiny_bundle() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("tiny.cibd");
    let o = cib(&["gen-data", "--spec", s(&configs().join("tiny.spec")), "--out", s(&data)]);
    assert!(o.status.success());
    let run = dir.path().join("run");
    let start = Instant::now();
    let o = cib(&["train", "--config", s(&configs().join("default.cfg")), "--data", s(&data), "--out-dir", s(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(300));
    for f in ["metrics.csv", "summary.txt", "config.txt", "best.ckpt", "final.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn flags_override_config_and_snapshot_is_written() {
    let dir = TempDir::new().unwrap();
    let data = small_bundle(&dir);
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "epochs = 9\nbeta = 0.5\nseed = 4\n").unwrap();
    let run = dir.path().join("run");
    let o = cib(&["train", "--config", s(&cfg), "--data", s(&data), "--out-dir", s(&run), "--model", "point", "--epochs", "1", "--set", "beta=0.25"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let snap = std::fs::read_to_string(run.join("config.txt")).unwrap();
    for line in ["epochs = 1", "beta = 0.25", "seed = 4", "model = point"] {
        assert!(snap.contains(line), "{line} missing from\n{snap}");
    }
    // the snapshot is itself a valid config
    let again = dir.path().join("again");
    let o = cib(&["train", "--config", s(&run.join("config.txt")), "--data", s(&data), "--out-dir", s(&again)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(run.join("metrics.csv")).unwrap(), std::fs::read(again.join("metrics.csv")).unwrap());
}

#[test]
fn train_error_exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let o = cib(&["train", "--data", s(&dir.path().join("missing.cibd")), "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let data = small_bundle(&dir);
    let o = cib(&["train", "--data", s(&data), "--out-dir", s(&out), "--set", "alpha=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alpha"));
    let o = cib(&["train", "--data", s(&data), "--out-dir", s(&out), "--set", "colour=red"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cib(&["train", "--data", s(&data), "--out-dir", s(&out), "--model", "point", "--epochs", "2", "--set", "lr=1e200"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let dir = TempDir::new().unwrap();
    let data = small_bundle(&dir);
    for model in ["cib", "point", "ct"] {
        let mut files = Vec::new();
        for run in ["a", "b"] {
            let out = dir.path().join(format!("{model}-{run}"));
            let mut args = vec!["train", "--data", s(&data), "--out-dir", s(&out), "--model", model, "--seed", "5"];
            args.extend(QUICK);
            let o = cib(&args);
            assert!(o.status.success(), "{model}: {}", stderr(&o));
            files.push(std::fs::read(out.join("metrics.csv")).unwrap());
        }
        assert_eq!(files[0], files[1], "{model}");
    }
}

#[test]
fn eval_prints_accuracy_for_both_statistics() {
    let dir = TempDir::new().unwrap();
    let data = small_bundle(&dir);
    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out-dir", s(&run)];
    args.extend(QUICK);
    assert!(cib(&args).status.success());
    let ckpt = run.join("final.ckpt");
    let mut seen = Vec::new();
    for flag in [None, Some("--ood-batchstats")] {
        let mut args = vec!["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "test_ood"];
        args.extend(flag);
        let o = cib(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        let last = out.lines().last().unwrap();
        let acc: f64 = last.strip_prefix("accuracy=").unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(out.contains(if flag.is_some() { "stats=batch" } else { "stats=running" }));
        seen.push(out);
    }
    assert_ne!(seen[0], seen[1]);
}

#[test]
fn eval_rejects_missing_and_incompatible_inputs() {
    let dir = TempDir::new().unwrap();
    let data = small_bundle(&dir);
    let run = dir.path().join("run");
    let o = cib(&["train", "--data", s(&data), "--out-dir", s(&run), "--model", "point", "--epochs", "1"]);
    assert!(o.status.success());
    let ckpt = run.join("final.ckpt");
    let o = cib(&["eval", "--checkpoint", s(&dir.path().join("none.ckpt")), "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(2));
    let wide = dir.path().join("wide.cibd");
    let o = cib(&["gen-data", "--out", s(&wide), "--set", "invariant_dim=6", "--set", "train_size=100", "--set", "val_size=40", "--set", "test_size=40"]);
    assert!(o.status.success());
    let o = cib(&["eval", "--checkpoint", s(&ckpt), "--data", s(&wide)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("shape"), "{}", stderr(&o));
    let o = cib(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "holdout"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_grid_is_complete_and_reproducible() {
    let dir = TempDir::new().unwrap();
    let data = small_bundle(&dir);
    let base = ["sweep", "--data", s(&data), "--contexts", "1,2", "--weights", "1,3", "--seeds", "2", "--epochs", "1", "--set", "batch_size=32"];
    let run = |jobs: &str, out: &Path| {
        let mut args = base.to_vec();
        args.extend(["--jobs", jobs, "--out-dir", s(out)]);
        let o = cib(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let one = run("1", &a);
    let two = run("2", &b);
    assert_eq!(one, two);
    let lines: Vec<&str> = one.lines().collect();
    assert_eq!(lines[0], "n,m,seed,test_iid_accuracy,test_ood_accuracy,steps_to_threshold");
    assert_eq!(lines.len(), 1 + 2 * 2 * 2);
    assert!(lines[1].starts_with("1,1,0,"));
    assert!(lines[8].starts_with("2,3,1,"));
    assert_eq!(std::fs::read_to_string(a.join("sweep.csv")).unwrap(), one);
    assert!(a.join("config.txt").exists());
    let mut bad = base.to_vec();
    bad[4] = "0,1";
    assert_eq!(cib(&bad).status.code(), Some(2));
}

#[test]
fn verify_causal_default_passes() {
    let o = cib(&["verify-causal"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("derivation.passed=7/7"));
    assert!(out.contains("factorisation.passed=20/20"));
    assert!(out.ends_with("verified=true\n"));
}

#[test]
fn verify_causal_names_the_failing_step() {
    let dir = TempDir::new().unwrap();
    let g = cib_causal::build_training_graph().with_edge("W", "X").unwrap();
    let path = dir.path().join("mutated.txt");
    std::fs::write(&path, cib_causal::to_edge_list(&g)).unwrap();
    let o = cib(&["verify-causal", "--graph", s(&path), "--models", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("derivation step 7"), "{}", stderr(&o));

    std::fs::write(&path, "A -> B\nB -> C\n").unwrap();
    let o = cib(&["verify-causal", "--graph", s(&path)]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&path, "A -> B\nB -> A\n").unwrap();
    assert_eq!(cib(&["verify-causal", "--graph", s(&path)]).status.code(), Some(2));
}
