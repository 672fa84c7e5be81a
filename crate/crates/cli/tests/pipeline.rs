//! Drives the `kbound` binary through the full pipeline on the bundled
//! synthetic fixture.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic-200")
}

fn kbound(out: &Path, args: &[&str]) -> Output {
    let cfg = fixture().join("kbound.toml");
    let output = Command::new(env!("CARGO_BIN_EXE_kbound"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn kbound");
    assert!(
        output.status.success(),
        "kbound {args:?} failed:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Runs every subcommand once; returns the wall time.
fn pipeline(out: &Path) -> Duration {
    let f = fixture();
    let p = |name: &str| out.join(name).display().to_string();
    let train = f.join("train.jsonl").display().to_string();
    let held = f.join("heldout.jsonl").display().to_string();
    let start = Instant::now();
    kbound(out, &["probe", "--questions", &train, "--name", "train-probe"]);
    kbound(out, &["probe", "--questions", &held, "--name", "heldout-probe"]);
    kbound(out, &["partition", "--probe", &p("train-probe.jsonl")]);
    kbound(out, &["build-dataset", "--partition", &p("partition.jsonl")]);
    kbound(out, &["toy-train", "--dataset", &p("dataset.internal.jsonl")]);
    let heldout_probe = p("heldout-probe.jsonl");
    let eval = |mode: &str, extra: &[&str]| {
        let mut args = vec!["eval", "--mode", mode, "--questions", &held, "--probe", &heldout_probe];
        args.extend_from_slice(extra);
        kbound(out, &args);
    };
    eval("raw", &[]);
    eval("prior", &[]);
    eval("posterior", &[]);
    let train_probe = p("train-probe.jsonl");
    let labeled = ["--train-questions", train.as_str(), "--train-probe", train_probe.as_str()];
    eval("ic-idk", &labeled);
    eval("verb", &labeled);
    let with_model = format!("synthetic://?seed=9&n=200&checkpoint={}", p("checkpoint.json"));
    eval("coke", &["--endpoint", &with_model]);
    kbound(
        out,
        &[
            "threshold-search",
            "--questions",
            &train,
            "--probe",
            &train_probe,
            "--apply-questions",
            &held,
            "--apply-probe",
            &heldout_probe,
        ],
    );
    kbound(out, &["histogram", "--questions", &train, "--probe", &train_probe]);
    start.elapsed()
}

#[test]
fn full_pipeline_on_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let elapsed = pipeline(out);
    assert!(elapsed < Duration::from_secs(60), "pipeline took {elapsed:?}");

    // Partition manifest carries the resolved thresholds and counts.
    let run = read_json(&out.join("partition.run.json"));
    let d = &run["details"];
    assert!(d["delta_unk"].as_f64().unwrap() < d["delta_k"].as_f64().unwrap());
    assert_eq!(d["counts"]["total"], 120);

    // The probe manifest says where generation was cut.
    let probe = read_json(&out.join("train-probe.run.json"));
    assert_eq!(probe["details"]["stop_rule"]["stop"], serde_json::json!(["\n"]));

    // Two eval modes on the same probe share the split and align row-wise.
    let coke = read_json(&out.join("eval-coke.report.json"));
    let prior = read_json(&out.join("eval-prior.report.json"));
    assert_eq!(coke["split_sha256"], prior["split_sha256"]);
    let cells = |r: &Value| r["report"]["t_k"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum::<u64>();
    assert_eq!(cells(&coke), cells(&prior));
    assert!(coke["report"]["consistency"].as_f64().is_some());

    // Every manifest lists files that still match their digests.
    let verify = |m: &Path| {
        Command::new(env!("CARGO_BIN_EXE_kbound"))
            .arg("verify")
            .arg(m)
            .output()
            .unwrap()
    };
    let mut manifests = 0;
    for entry in std::fs::read_dir(out).unwrap() {
        let path = entry.unwrap().path();
        if path.to_string_lossy().ends_with(".run.json") {
            manifests += 1;
            let m = read_json(&path);
            for o in m["outputs"].as_array().unwrap() {
                assert!(Path::new(o["path"].as_str().unwrap()).exists());
            }
            assert!(verify(&path).status.success(), "{}", path.display());
        }
    }
    assert_eq!(manifests, 13);

    // Tampering is caught.
    std::fs::write(out.join("partition.jsonl"), "{}\n").unwrap();
    assert!(!verify(&out.join("partition.run.json")).status.success());
}

/// Drops the per-record timestamp that probe results carry.
fn without_timestamps(text: &str) -> Vec<Value> {
    text.lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            if let Some(o) = v.as_object_mut() {
                o.remove("created_at");
            }
            v
        })
        .collect()
}

#[test]
fn same_seed_same_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for name in ["train-probe.jsonl", "heldout-probe.jsonl"] {
        let read = |d: &Path| without_timestamps(&std::fs::read_to_string(d.join(name)).unwrap());
        assert_eq!(read(a.path()), read(b.path()), "{name}");
    }
    for name in [
        "partition.jsonl",
        "dataset.internal.jsonl",
        "checkpoint.json",
        "train_log.jsonl",
        "eval-coke.report.json",
        "eval-ic-idk.outcomes.jsonl",
        "eval-verb.report.json",
        "histogram.csv",
    ] {
        let read = |d: &Path| std::fs::read(d.join(name)).unwrap();
        assert_eq!(read(a.path()), read(b.path()), "{name}");
    }
}

#[test]
fn config_errors_are_listed_together() {
    let dir = tempfile::tempdir().unwrap();
    let train = fixture().join("train.jsonl");
    let out = Command::new(env!("CARGO_BIN_EXE_kbound"))
        .args(["--unk-quantile", "0.7", "--k-quantile", "0.6", "--max-parallel", "0"])
        .arg("--out-dir")
        .arg(dir.path())
        .args(["--endpoint", "synthetic://?seed=1&n=10", "probe", "--questions"])
        .arg(&train)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(out.stderr.split(|&b| b == b'\n').next().unwrap()).unwrap();
    assert_eq!(err["error"]["kind"], "config");
    let v = err["error"]["violations"].as_array().unwrap();
    assert_eq!(v.len(), 2, "{v:?}");
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none(), "nothing is written on a config error");
}

#[test]
fn runtime_failures_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    std::fs::write(&data, "").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_kbound"))
        .args(["--endpoint", "http://127.0.0.1:9/v1", "--model", "m", "--out-dir"])
        .arg(dir.path())
        .args(["toy-train", "--dataset"])
        .arg(&data)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let last = out.stderr.trim_ascii().split(|&b| b == b'\n').next_back().unwrap();
    let err: Value = serde_json::from_slice(last).unwrap();
    assert!(err["error"]["message"].is_string());
}
