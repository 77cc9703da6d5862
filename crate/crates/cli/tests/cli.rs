use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn advnorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advnorm")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small enough that a full matrix finishes in seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let out = dir.join("dump");
    advnorm(&["report", "--rundir", dir.join("none").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let mut c: Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    c["phantom"]["shape"] = json!([32, 32, 32]);
    c["phantom"]["volumes_per_domain"] = json!(2);
    c["networks"]["generator"]["channels"] = json!([2, 4]);
    c["networks"]["segmenter"]["channels"] = json!([2, 4]);
    c["networks"]["discriminator"]["channels"] = json!([2, 4]);
    c["train"]["pretrain_epochs"] = json!(1);
    c["train"]["total_epochs"] = json!(2);
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    path
}

#[test]
fn help_exits_zero() {
    let o = advnorm(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["phantom", "preprocess", "train", "evaluate", "normalize", "report", "matrix"] {
        assert!(text.contains(sub), "{sub} missing from usage");
    }
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let o = advnorm(&["train", "--bogus", "--out", "x"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(code(&advnorm(&["train", "--out", "x", "--mode", "gan"])), 1);
}

#[test]
fn missing_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = advnorm(&["train", "--config", "missing.json", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("not found"));
}

#[test]
fn bad_thread_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_advnorm"))
        .args(["phantom", "--out", dir.path().to_str().unwrap()])
        .env("ADVNORM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("ADVNORM_THREADS"));
}

#[test]
fn report_without_reports_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = advnorm(&["report", "--rundir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn stages_chain_and_snapshot_their_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let p = |s: &str| d.join(s).to_str().unwrap().to_string();
    let cfg = cfg.to_str().unwrap();

    let o = advnorm(&["phantom", "--config", cfg, "--out", &p("data"), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.join("data/manifest.json").exists());
    let snap: Value = serde_json::from_str(&std::fs::read_to_string(d.join("data/config.json")).unwrap()).unwrap();
    assert_eq!(snap["seed"], 3);
    assert_eq!(snap["phantom"]["seed"], 3);

    let manifest = p("data/manifest.json");
    let o = advnorm(&["preprocess", "--config", cfg, "--manifest", &manifest, "--out", &p("patches"), "--split", "0.6,0.2,0.2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.join("patches/index.json").exists());
    assert!(d.join("patches/config.json").exists());

    let o = advnorm(&["train", "--config", cfg, "--patches", &p("patches"), "--mode", "no_discriminator", "--out", &p("train")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = std::fs::read_to_string(d.join("train/metrics.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let _: Value = serde_json::from_str(line).unwrap();
    }
    assert!(d.join("train/config.json").exists());

    let ckpt = p("train/checkpoint.mvol");
    let o = advnorm(&["evaluate", "--config", cfg, "--patches", &p("patches"), "--checkpoint", &ckpt, "--split", "test", "--out", &p("eval")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ev: Value = serde_json::from_str(&std::fs::read_to_string(d.join("eval/evaluation.json")).unwrap()).unwrap();
    assert_eq!(ev["dice"].as_array().unwrap().len(), 3);
    let csv = std::fs::read_to_string(d.join("eval/histograms_domain1.csv")).unwrap();
    assert!(csv.starts_with("bin_center,input_mass,normalized_mass,class\n"));

    let input = p("data/d1_s000.mvol");
    for run in ["norm_a", "norm_b"] {
        let o = advnorm(&["normalize", "--config", cfg, "--checkpoint", &ckpt, "--input", &input, "--out", &p(run)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = std::fs::read(d.join("norm_a/d1_s000.mvol")).unwrap();
    assert_eq!(a, std::fs::read(d.join("norm_b/d1_s000.mvol")).unwrap());
    assert_ne!(a, std::fs::read(d.join("data/d1_s000.mvol")).unwrap());

    let o = advnorm(&["train", "--config", cfg, "--patches", &p("patches"), "--mode", "segmenter_only", "--out", &p("seg")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = advnorm(&["normalize", "--config", cfg, "--checkpoint", &p("seg/checkpoint.mvol"), "--input", &input, "--out", &p("norm_c")]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("generator"));
}

#[test]
fn resume_continues_to_the_configured_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let mut c: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    c["train"]["total_epochs"] = json!(1);
    let short = d.join("short.json");
    std::fs::write(&short, c.to_string()).unwrap();
    let p = |s: &str| d.join(s).to_str().unwrap().to_string();
    let o = advnorm(&["train", "--config", short.to_str().unwrap(), "--mode", "adversarial", "--out", &p("a")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = advnorm(&["train", "--config", cfg.to_str().unwrap(), "--checkpoint", &p("a/checkpoint.mvol"), "--out", &p("b")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let full = advnorm(&["train", "--config", cfg.to_str().unwrap(), "--mode", "adversarial", "--out", &p("c")]);
    assert_eq!(code(&full), 0);
    assert_eq!(
        std::fs::read_to_string(d.join("b/metrics.ndjson")).unwrap(),
        std::fs::read_to_string(d.join("c/metrics.ndjson")).unwrap()
    );
}

#[test]
fn matrix_writes_seven_reports_and_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let o = advnorm(&["matrix", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let reports: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(run.join("reports.json")).unwrap()).unwrap();
    assert_eq!(reports.iter().map(|r| r["id"].as_u64().unwrap()).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6, 7]);
    for id in 1..=7 {
        assert!(run.join(format!("exp{id}/report.json")).exists());
    }
    for id in [1, 2, 5, 6, 7] {
        assert!(run.join(format!("exp{id}/checkpoint.mvol")).exists());
    }
    assert!(run.join("table.txt").exists() && run.join("table.csv").exists() && run.join("config.json").exists());
    assert!(run.join("histograms_exp7_domain2.csv").exists());

    let o = advnorm(&["report", "--rundir", run.to_str().unwrap(), "--out", dir.path().join("rep").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(table.lines().count(), 9);
    assert_eq!(std::fs::read_to_string(dir.path().join("rep/table.txt")).unwrap(), table);
}
