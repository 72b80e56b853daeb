//! End-to-end runs of every subcommand on a tiny configuration.

use std::path::Path;
use std::process::Command;

mod common;
use common::TINY;

fn imitkd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_imitkd")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = imitkd(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn full_pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = p(d, "tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.as_str();
    let (data, teacher, seqkd) = (p(d, "data"), p(d, "teacher"), p(d, "seqkd"));

    ok(&["gen-data", "--config", c, "--out", &data]);
    assert!(Path::new(&data).join("manifest.json").exists());
    ok(&["train-teacher", "--config", c, "--data", &data, "--out", &teacher]);
    let tmodel = format!("{teacher}/model.bin");
    for f in ["model.bin", "log.ndjson", "metrics.json", "metrics.csv", "config.toml", "run.json", "checkpoints/step-10.model", "checkpoints/step-10.adam"] {
        assert!(Path::new(&teacher).join(f).exists(), "missing {f}");
    }
    ok(&["build-seqkd", "--config", c, "--data", &data, "--teacher", &tmodel, "--out", &seqkd]);
    let dstar = format!("{seqkd}/train.tsv");

    let mut runs = Vec::new();
    for (variant, name) in [("Vanilla", "van"), ("SeqKD", "seq"), ("ImitKD", "imit"), ("ImitKD*+Full", "star")] {
        let out = p(d, name);
        ok(&["distill", "--config", c, "--data", &data, "--teacher", &tmodel, "--seqkd", &dstar, "--variant", variant, "--out", &out]);
        runs.push(out);
    }
    // same config and seed, fresh directory: metrics must match byte for byte
    let again = p(d, "imit2");
    ok(&["distill", "--config", c, "--data", &data, "--teacher", &tmodel, "--variant", "ImitKD", "--out", &again]);
    let read = |dir: &str, f: &str| std::fs::read(Path::new(dir).join(f)).unwrap();
    assert_eq!(read(&runs[2], "metrics.json"), read(&again, "metrics.json"));
    assert_eq!(read(&runs[2], "log.ndjson"), read(&again, "log.ndjson"));
    let other = p(d, "imit-seed9");
    ok(&["distill", "--config", c, "--data", &data, "--teacher", &tmodel, "--variant", "ImitKD", "--seed", "9", "--out", &other]);
    assert_ne!(read(&runs[2], "log.ndjson"), read(&other, "log.ndjson"));

    let smodel = format!("{}/model.bin", runs[0]);
    ok(&["seqinter", "--config", c, "--data", &data, "--teacher", &tmodel, "--student", &smodel, "--out", &p(d, "inter")]);
    for _ in 0..2 {
        ok(&["evaluate", "--config", c, "--data", &data, "--model", &smodel, "--out", &p(d, "eval")]);
    }
    ok(&["evaluate", "--config", c, "--data", &data, "--model", &smodel, "--out", &p(d, "eval2")]);
    assert_eq!(read(&p(d, "eval"), "metrics.json"), read(&p(d, "eval2"), "metrics.json"));
    ok(&["decode", "--config", c, "--data", &data, "--model", &smodel, "--split", "valid", "--out", &p(d, "dec")]);
    let hyps = std::fs::read_to_string(Path::new(&p(d, "dec")).join("hypotheses.txt")).unwrap();
    assert_eq!(hyps.lines().count(), 6);
    ok(&["analyze-length", "--config", c, "--data", &data, "--model", &smodel, "--model", &tmodel, "--out", &p(d, "len")]);
    ok(&["bench", "--config", c, "--data", &data, "--student", &smodel, "--teacher", &tmodel, "--out", &p(d, "bench")]);
    let speed = std::fs::read_to_string(Path::new(&p(d, "bench")).join("speed.csv")).unwrap();
    assert_eq!(speed.lines().count(), 3);
    ok(&["dagger-sim", "--config", c, "--out", &p(d, "dagger")]);
    ok(&["dagger-sim", "--config", c, "--out", &p(d, "dagger2")]);
    assert_eq!(read(&p(d, "dagger"), "dagger.json"), read(&p(d, "dagger2"), "dagger.json"));
    let csv = std::fs::read_to_string(Path::new(&p(d, "dagger")).join("dagger.csv")).unwrap();
    assert!(csv.starts_with("method,T,epsilon,mean_mistakes,stderr,fitted_exponent\n"));
    assert_eq!(csv.lines().count(), 5);

    let mut args = vec!["report", "--out"];
    let rep = p(d, "report");
    args.push(&rep);
    for r in &runs {
        args.push("--run");
        args.push(r);
    }
    ok(&args);
    let md = std::fs::read_to_string(Path::new(&rep).join("report.md")).unwrap();
    for v in ["Vanilla", "SeqKD", "ImitKD", "ImitKD*+Full"] {
        assert!(md.contains(&format!("| {v} |")), "{md}");
    }
}

#[test]
fn bad_inputs_fail_with_messages() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = p(d, "bad.toml");
    std::fs::write(&cfg, "[distill]\nbatch = 3\n").unwrap();
    let out = imitkd(&["gen-data", "--config", &cfg, "--out", &p(d, "x")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch"));

    let good = p(d, "tiny.toml");
    std::fs::write(&good, TINY).unwrap();
    let data = p(d, "data");
    ok(&["gen-data", "--config", &good, "--out", &data]);
    let out = imitkd(&["distill", "--config", &good, "--data", &data, "--variant", "ImitKD", "--out", &p(d, "y")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--teacher"));
    let out = imitkd(&["distill", "--config", &good, "--data", &data, "--variant", "Nope", "--out", &p(d, "z")]);
    assert!(!out.status.success());
    assert!(!imitkd(&["dagger-sim"]).status.success());
}
