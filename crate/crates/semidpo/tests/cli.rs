//! The `semidpo` binary end to end on small configs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use semidpo::commands::{diagnose_entries, Context};
use semidpo::config::RunConfig;
use semidpo::dataset::load_dataset;
use semidpo_core::model::init_params;
use semidpo_core::math;
use serde_json::Value;

const SMALL: &str = r#"
[data]
n_pairs = 300
[train]
iterations = 2
[train.pretrain]
steps = 60
[train.cold]
steps = 20
[train.iter]
steps = 20
[train.eval]
prompts = 4
[diagnose]
buckets = 2
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semidpo"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn metrics(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_is_reproducible_and_reports_conflict() {
    let dir = workspace();
    let d = dir.path();
    let text = ok(d, &["-c", "small.toml", "gen", "--out", "a.jsonl"]);
    assert!(text.contains("p_c"));
    ok(d, &["-c", "small.toml", "gen", "--out", "b.jsonl"]);
    assert_eq!(fs::read(d.join("a.jsonl")).unwrap(), fs::read(d.join("b.jsonl")).unwrap());
    let (header, pairs) = load_dataset(&d.join("a.jsonl")).unwrap();
    assert_eq!((header.k, pairs.len()), (3, 300));
    ok(d, &["-c", "small.toml", "--set", "data.seed=1", "gen", "--out", "c.jsonl"]);
    assert_ne!(fs::read(d.join("a.jsonl")).unwrap(), fs::read(d.join("c.jsonl")).unwrap());
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = workspace();
    let d = dir.path();
    assert_eq!(code(d, &["-c", "small.toml", "filter", "--dataset", "missing.jsonl"]), 3);
    assert_eq!(code(d, &["-c", "missing.toml", "gen"]), 3);
    fs::write(d.join("bad.toml"), "[data]\nnot_a_field = 1\n").unwrap();
    assert_eq!(code(d, &["-c", "bad.toml", "gen"]), 2);
    assert_eq!(code(d, &["-c", "small.toml", "--set", "train.beta=-1", "gen"]), 2);
    assert_eq!(code(d, &["-c", "small.toml", "--set", "no.such=1", "gen"]), 2);
    assert_eq!(code(d, &["-c", "small.toml", "train", "--mode", "sideways"]), 2);
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(d, &["-c", "small.toml", "eval", "--checkpoint", "junk.ckpt"]), 3);
    let err = String::from_utf8(run(d, &["-c", "small.toml", "filter", "--dataset", "missing.jsonl"]).stderr).unwrap();
    assert!(err.contains("missing.jsonl"), "{err}");
}

#[test]
fn growing_the_committee_never_grows_the_clean_set() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["-c", "small.toml", "gen", "--out", "data.jsonl"]);
    let specs = [
        "[[committee]]\nkind = \"alignment\"\n",
        "[[committee]]\nkind = \"magnitude\"\nradius = 1.0\n",
        "[[committee]]\nkind = \"roughness\"\n",
    ];
    let mut prev = f64::INFINITY;
    for k in 1..=3 {
        let cfg = format!("{SMALL}\n{}", specs[..k].concat());
        fs::write(d.join("k.toml"), cfg).unwrap();
        let out = format!("k{k}");
        ok(d, &["-c", "k.toml", "filter", "--dataset", "data.jsonl", "--out-dir", &out]);
        let stats: Value = serde_json::from_str(&fs::read_to_string(d.join(&out).join("data.partition.json")).unwrap()).unwrap();
        let frac = stats["labeled_fraction"].as_f64().unwrap();
        assert!(frac <= prev, "K = {k}: {frac} > {prev}");
        let (_, labeled) = load_dataset(&d.join(&out).join("data.labeled.jsonl")).unwrap();
        let (_, unlabeled) = load_dataset(&d.join(&out).join("data.unlabeled.jsonl")).unwrap();
        assert_eq!(labeled.len() + unlabeled.len(), 300);
        prev = frac;
    }
}

#[test]
fn train_writes_one_checkpoint_per_round() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["-c", "small.toml", "gen", "--out", "data.jsonl"]);

    let text = ok(d, &["-c", "small.toml", "train", "--dataset", "data.jsonl", "--out-dir", "clean", "--mode", "clean_only"]);
    assert!(text.starts_with("mode clean_only"), "{text}");
    assert!(d.join("clean/iter0.ckpt").exists());
    assert!(!d.join("clean/iter1.ckpt").exists());
    let lines = metrics(&d.join("clean/metrics.jsonl"));
    let iters: Vec<u64> = lines.iter().filter(|l| l["kind"] == "iteration").map(|l| l["iteration"].as_u64().unwrap()).collect();
    assert_eq!(iters, vec![0]);

    ok(d, &["-c", "small.toml", "train", "--dataset", "data.jsonl", "--out-dir", "semi"]);
    for i in 0..3 {
        assert!(d.join(format!("semi/iter{i}.ckpt")).exists());
    }
    assert!(d.join("semi/reference.ckpt").exists());
    assert!(d.join("semi/pseudo_labels_iter1.jsonl").exists());
    assert_eq!(fs::read_to_string(d.join("semi/thresholds.jsonl")).unwrap().lines().count(), 2);
    let lines = metrics(&d.join("semi/metrics.jsonl"));
    let kinds: Vec<&str> = lines.iter().map(|l| l["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["run", "reference", "partition", "iteration", "iteration", "iteration"]);
    let iter2 = &lines[5];
    assert_eq!(iter2["lr"].as_f64().unwrap(), 1e-4);

    // a given reference skips pretraining and reproduces the same rounds
    ok(d, &["-c", "small.toml", "train", "--dataset", "data.jsonl", "--out-dir", "again", "--reference", "semi/reference.ckpt"]);
    assert_eq!(fs::read(d.join("semi/iter2.ckpt")).unwrap(), fs::read(d.join("again/iter2.ckpt")).unwrap());

    // worker count changes no artifact beyond the recorded count itself
    ok(d, &["-c", "small.toml", "--workers", "3", "train", "--dataset", "data.jsonl", "--out-dir", "threads"]);
    for name in ["reference.ckpt", "iter0.ckpt", "iter2.ckpt", "thresholds.jsonl", "pseudo_labels_iter2.jsonl"] {
        assert_eq!(fs::read(d.join("semi").join(name)).unwrap(), fs::read(d.join("threads").join(name)).unwrap(), "{name}");
    }
    let mut serial = metrics(&d.join("semi/metrics.jsonl"));
    let threaded = metrics(&d.join("threads/metrics.jsonl"));
    assert_eq!(threaded[0]["config"]["workers"], 3);
    serial[0]["config"]["workers"] = 3.into();
    assert_eq!(serial, threaded);

    let text = ok(d, &["-c", "small.toml", "diagnose", "--checkpoint", "semi/iter2.ckpt", "--dataset", "data.jsonl", "--out", "diag.json"]);
    assert!(text.contains("0 bound violations"), "{text}");
    let diag: Value = serde_json::from_str(&fs::read_to_string(d.join("diag.json")).unwrap()).unwrap();
    // whole timeline plus two buckets, three dimensions each
    assert_eq!(diag["entries"].as_array().unwrap().len(), 9);

    ok(d, &["-c", "small.toml", "eval", "--checkpoint", "semi/iter2.ckpt", "--baseline", "semi/iter0.ckpt", "--csv", "eval.csv"]);
    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["win_rate"].as_array().unwrap().len(), 3);
    assert!(fs::read_to_string(d.join("eval.csv")).unwrap().starts_with("dim,name,mean,win_rate"));
}

#[test]
fn diagnose_bound_tracks_conflict() {
    let mut cfg = RunConfig::default();
    cfg.data.n_pairs = 400;
    cfg.diagnose.buckets = 2;
    let ctx = Context::new(cfg.clone()).unwrap();
    let pairs = semidpo_core::datagen::gen_dataset(&cfg.gen_profile()).unwrap();
    let part = semidpo_core::rewards::consensus_partition(&pairs, &cfg.committee).unwrap();
    let arch = cfg.arch();
    let reference = init_params(&arch, &mut math::seeded(1)).unwrap();
    let theta: Vec<f64> = reference.theta().iter().map(|v| v * 1.1 + 0.01).collect();
    let params = semidpo_core::model::DenoiserParams::new(arch, theta).unwrap();

    let clean = diagnose_entries(&ctx, &params, &reference, &part.labeled).unwrap();
    let noisy = diagnose_entries(&ctx, &params, &reference, &part.unlabeled).unwrap();
    assert!(clean.iter().all(|e| e.bound_holds && e.report.bound == 0.0 && e.report.p_c == 0.0));
    assert!(noisy.iter().all(|e| e.bound_holds));
    let whole = |es: &[semidpo::commands::DiagnoseEntry], k: usize| {
        es.iter().find(|e| e.bucket.is_none() && e.dim == k).unwrap().report.bound
    };
    for k in 0..3 {
        assert!(whole(&noisy, k) > whole(&clean, k), "dim {k}");
    }
}
