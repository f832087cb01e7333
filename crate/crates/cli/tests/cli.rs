use std::path::Path;
use std::process::{Command, Output};

fn reld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reld"))
        .args(args)
        .env_remove("REld_THREADS")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_CONFIG: &str = "\
[model]
d_h = 8
heads = 2
layers = 1
d_ff = 16

[train]
epochs = 1
instances_per_epoch = 8
batch_size = 4

[train.gen]
size_min = 5
size_max = 6

[eval]
count = 3
sizes = [6]
";

const VRP: &str = "NAME : toy\nTYPE : CVRP\nDIMENSION : 5\nEDGE_WEIGHT_TYPE : EUC_2D\nCAPACITY : 10\nNODE_COORD_SECTION\n1 50 50\n2 10 20\n3 90 15\n4 80 95\n5 20 70\nDEMAND_SECTION\n1 0\n2 4\n3 6\n4 5\n5 3\nDEPOT_SECTION\n1\n-1\nEOF\n";

#[test]
fn gen_writes_one_line_per_instance_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ljson");
    let b = dir.path().join("b.ljson");
    for p in [&a, &b] {
        let out = reld(&["gen", "--count", "100", "--seed", "7", "--out", s(p), "--quiet"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(out.stdout.is_empty());
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 100);
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(reld(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(reld(&["gen"]).status.code(), Some(1));
    let out = reld(&["gen", "--count", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen"));
    assert_eq!(reld(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nus_idt = true\n").unwrap();
    let out = reld(&["gen", "--count", "1", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("config") && err.contains("use_idt"), "{err}");

    let junk = dir.path().join("junk.vrp");
    std::fs::write(&junk, "NAME : x\n").unwrap();
    let out = reld(&["oracle", "--data", s(&junk)]);
    assert_eq!(out.status.code(), Some(2));

    let ckpt = dir.path().join("missing.ckpt");
    let out = reld(&["solve", "--checkpoint", s(&ckpt), "--instance", s(&junk)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_passes() {
    let out = reld(&["grad-check", "--dh", "16", "--n", "8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max_rel_error"));
}

#[test]
fn grad_check_failure_is_numeric() {
    let out = reld(&["grad-check", "--dh", "8", "--heads", "2", "--layers", "1", "--n", "5", "--tolerance", "1e-30"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_solve_eval_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let run = dir.path().join("run");
    let out = reld(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("epoch=1 ") && l.contains("mean_cost=")));
    let ckpt = run.join("epoch-0001.ckpt");
    assert!(ckpt.exists());
    assert!(run.join("train_report.json").exists());

    let vrp = dir.path().join("toy.vrp");
    std::fs::write(&vrp, VRP).unwrap();
    let out = reld(&["solve", "--checkpoint", s(&ckpt), "--instance", s(&vrp), "--augment", "--k", "100"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("K = 4"), "{stdout}");
    assert!(stdout.contains("Route #1:") && stdout.contains("Cost "));

    let data = dir.path().join("held.ljson");
    assert!(reld(&["gen", "--count", "4", "--size", "6", "--out", s(&data), "--quiet"]).status.success());
    let report = dir.path().join("report.jsonl");
    let out = reld(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--oracle", "--out", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 5);
    for line in text.lines().skip(1) {
        for key in ["\"instance\"", "\"cost\"", "\"ref\"", "\"gap_pct\"", "\"time_ms\""] {
            assert!(line.contains(key), "{line}");
        }
    }

    let probe = dir.path().join("probe");
    let out = reld(&[
        "probe-extension",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--deltas",
        "0,0.5",
        "--out",
        s(&probe),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(probe.join("delta-0.jsonl").exists() && probe.join("delta-0.5.jsonl").exists());

    let tuned = dir.path().join("tuned");
    let out = reld(&[
        "fine-tune",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--freeze",
        "all",
        "--out",
        s(&tuned),
        "--quiet",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
}

#[test]
fn oracle_and_config_commands() {
    let dir = tempfile::tempdir().unwrap();
    let vrp = dir.path().join("toy.vrp");
    std::fs::write(&vrp, VRP).unwrap();
    let out = reld(&["oracle", "--data", s(&vrp)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("toy "));

    let written = dir.path().join("desk.toml");
    assert!(reld(&["config", "--out", s(&written), "--quiet"]).status.success());
    let text = std::fs::read_to_string(&written).unwrap();
    assert!(text.contains("[train.gen.capacity]"));
    let out = reld(&["gen", "--config", s(&written), "--count", "2", "--out", s(&dir.path().join("g.ljson"))]);
    assert!(out.status.success());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let run = dir.path().join(format!("run{threads}"));
        let out = reld(&["train", "--config", s(&cfg), "--out", s(&run), "--threads", threads, "--quiet"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        reports.push(std::fs::read(run.join("epoch-0001.ckpt")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let out = Command::new(env!("CARGO_BIN_EXE_reld"))
        .args(["gen", "--count", "1", "--out", s(&dir.path().join("t.ljson"))])
        .env("REld_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
