use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fsce(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsce"))
        .args(args)
        .env_remove("FSCE_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fsce(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = fsce(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic is one line: {err}");
    err
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn generate_twice_gives_identical_trees() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        ok(&["generate", "--images", "12", "--classes", "8", "--seed", "7", "--out", s(d)]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 12);
    assert_eq!(ta, tb);
}

#[test]
fn output_root_env_prefixes_relative_paths() {
    let t = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fsce"))
        .args(["generate", "--images", "3", "--out", "rel"])
        .env("FSCE_OUTPUT_ROOT", t.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(t.path().join("rel/annotations.txt").exists());
}

#[test]
fn split_recount_is_k_per_class() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    let split = t.path().join("split");
    ok(&["generate", "--images", "80", "--seed", "1", "--out", s(&data)]);
    let stdout = ok(&["split", "--data", s(&data), "--k", "5", "--novel", "ring,cross", "--seed", "3", "--out", s(&split)]);
    assert_eq!(stdout.lines().count(), 8);
    assert!(stdout.lines().all(|l| l.ends_with(" 5")));

    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in fs::read_to_string(split.join("annotations.txt")).unwrap().lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        for a in f[1..].chunks(5) {
            *counts.entry(a[0].to_string()).or_default() += 1;
        }
    }
    assert_eq!(counts.len(), 8);
    assert!(counts.values().all(|&n| n == 5), "{counts:?}");
    let classes = fs::read_to_string(split.join("classes.txt")).unwrap();
    assert!(classes.contains("cross novel") && classes.contains("ring novel"));
}

#[test]
fn missing_paths_name_the_path() {
    let err = fail(&["split", "--data", "/nonexistent/shapes", "--k", "5", "--novel", "ring", "--out", "/tmp/x"]);
    assert!(err.contains("/nonexistent/shapes"), "{err}");
    let err = fail(&["evaluate", "--model", "/nonexistent/m.ckpt", "--data", "/tmp", "--out", "/tmp/x"]);
    assert!(err.contains("/nonexistent/m.ckpt"), "{err}");
}

#[test]
fn bad_config_is_one_line_error() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("run.cfg");
    fs::write(&cfg, "cpe.reweight = square\n").unwrap();
    let err = fail(&["train-base", "--data", s(t.path()), "--out", s(t.path()), "--config", s(&cfg)]);
    assert!(err.contains("square"), "{err}");
    let err = fail(&["train-base", "--data", s(t.path()), "--out", s(t.path()), "--cpe.temperature=-1"]);
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn pipeline_end_to_end() {
    let t = tempfile::tempdir().unwrap();
    let p = |n: &str| t.path().join(n);
    ok(&["generate", "--images", "60", "--seed", "2", "--novel", "cross,ring", "--out", s(&p("pool"))]);
    ok(&["generate", "--images", "10", "--seed", "3", "--novel", "cross,ring", "--out", s(&p("test"))]);
    ok(&["split", "--data", s(&p("pool")), "--k", "2", "--novel", "cross,ring", "--out", s(&p("split"))]);

    // file sets 7 steps, the flag wins with 6
    fs::write(p("run.cfg"), "detector.steps = 7\nseed = 5\n").unwrap();
    ok(&["train-base", "--data", s(&p("pool")), "--out", s(&p("base")), "--config", s(&p("run.cfg")), "--detector.steps", "6"]);
    let m = manifest(&p("base"));
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["detector"]["steps"], 6);
    assert_eq!(fs::read_to_string(p("base/train_log.jsonl")).unwrap().lines().count(), 6);
    assert_eq!(m["inputs"][0][0], "data");
    assert_eq!(m["inputs"][0][1].as_str().unwrap().len(), 64);

    let base_ckpt = p("base/model.ckpt");
    let err = fail(&["evaluate", "--model", s(&base_ckpt), "--data", s(&p("test")), "--out", s(&p("ev0"))]);
    assert!(err.contains("prototype"), "{err}");

    ok(&["finetune", "--base", s(&base_ckpt), "--data", s(&p("split")), "--out", s(&p("ft0")), "--finetune.steps", "4", "--cpe.lambda", "0"]);
    assert_eq!(manifest(&p("ft0"))["strong_baseline"], true);
    ok(&["finetune", "--base", s(&base_ckpt), "--data", s(&p("split")), "--out", s(&p("ft1")), "--finetune.steps", "4"]);
    assert_eq!(manifest(&p("ft1"))["strong_baseline"], false);
    ok(&["finetune", "--base", s(&base_ckpt), "--data", s(&p("split")), "--out", s(&p("ft2")), "--finetune.steps", "4"]);
    assert_eq!(fs::read(p("ft1/model.ckpt")).unwrap(), fs::read(p("ft2/model.ckpt")).unwrap());

    let ft = p("ft1/model.ckpt");
    let report = ok(&["evaluate", "--model", s(&ft), "--data", s(&p("test")), "--out", s(&p("ev1"))]);
    assert!(report.lines().any(|l| l.starts_with("nAP50 ")), "{report}");
    let again = ok(&["evaluate", "--model", s(&ft), "--data", s(&p("test")), "--out", s(&p("ev2"))]);
    assert_eq!(report, again);
    assert_eq!(fs::read(p("ev1/report.json")).unwrap(), fs::read(p("ev2/report.json")).unwrap());

    let stats = ok(&["stats", "--data", s(&p("test")), "--model", s(&ft), "--out", s(&p("st"))]);
    assert!(stats.contains("mean_foreground_proposals"));

    ok(&["export-embeddings", "--model", s(&ft), "--data", s(&p("test")), "--out", s(&p("emb"))]);
    let csv = fs::read_to_string(p("emb/embeddings.csv")).unwrap();
    assert!(csv.starts_with("class_id,u,z_0,"));
    ok(&["plot", "--embeddings", s(&p("emb/embeddings.csv")), "--out", s(&p("emb/scatter.png"))]);
    assert!(p("emb/scatter.png").exists());

    let table = ok(&["ablate", "--base", s(&base_ckpt), "--data", s(&p("split")), "--test", s(&p("test")), "--grid", "", "--out", s(&p("abl0"))]);
    assert_eq!(table.lines().count(), 1);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("abl0/ablation.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 0);

    let table = ok(&[
        "ablate", "--base", s(&base_ckpt), "--data", s(&p("split")), "--test", s(&p("test")),
        "--grid", "0.2:64:0.7:one;0.5:128:0:linear", "--finetune.steps", "2", "--out", s(&p("abl1")),
    ]);
    assert_eq!(table.lines().count(), 3, "{table}");
}
