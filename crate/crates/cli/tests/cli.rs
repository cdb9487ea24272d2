use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn e2p(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_e2p")).current_dir(dir).args(args).output().expect("spawn e2p")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = e2p(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Asserts a failing run printed exactly one `error[category]: message` line.
fn error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    let line = lines[0];
    let rest = line.strip_prefix("error[").unwrap_or_else(|| panic!("bad error line {line}"));
    let (cat, msg) = rest.split_once("]: ").unwrap();
    assert!(!cat.is_empty() && cat.chars().all(|c| c.is_ascii_lowercase()), "{line}");
    assert!(!msg.is_empty());
    cat.to_string()
}

const TINY_DATA: &[&str] = &["gen-data", "--out", "data", "--n-train", "6", "--n-val", "3", "--resolution", "16", "--seed", "4"];
const TINY_TRAIN: &[&str] = &["train", "--data", "data", "--out", "model", "--epochs", "2", "--hidden", "4,4", "--seed", "4"];

fn pipeline(dir: &Path) {
    ok(dir, TINY_DATA);
    ok(dir, TINY_TRAIN);
    ok(dir, &["infer", "--ckpt", "model/model.e2pc", "--data", "data/val", "--out", "pred", "--steps", "2"]);
    ok(dir, &["eval", "--pred", "pred", "--data", "data/val"]);
    ok(dir, &["steps-sweep", "--ckpt", "model/model.e2pc", "--data", "data/val", "--out", "sweep", "--steps", "1,2,4"]);
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_writes_outputs_and_receipts() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    pipeline(dir);
    for f in ["model/model.e2pc", "model/losses.csv", "model/val.csv", "model/loss.svg", "model/run_config.txt"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_dir(dir.join("pred")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "dtf")).count(), 3);
    let eval = fs::read_to_string(dir.join("pred/eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 1 + 3 + 1);
    assert!(eval.lines().last().unwrap().starts_with("mean,"));
    let sweep = fs::read_to_string(dir.join("sweep/sweep.csv")).unwrap();
    let steps: Vec<&str> = sweep.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "4"]);
    assert!(fs::read_to_string(dir.join("sweep/sweep.svg")).unwrap().starts_with("<svg"));
    // infer picked up the model settings from the training receipt
    let receipt = fs::read_to_string(dir.join("pred/run_config.txt")).unwrap();
    assert!(receipt.starts_with("# infer\n"));
    for line in ["hidden=4,4", "mapping=sqrt", "seed=4", "steps=2", "task=depth"] {
        assert!(receipt.lines().any(|l| l == line), "{line} missing from {receipt}");
    }
}

#[test]
fn identical_flags_give_identical_bytes() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let names = files(a.path());
    assert_eq!(names, files(b.path()));
    assert!(names.len() > 20);
    for n in &names {
        assert!(fs::read(a.path().join(n)).unwrap() == fs::read(b.path().join(n)).unwrap(), "{} differs", n.display());
    }
}

#[test]
fn flags_override_config_file_over_defaults() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(dir, TINY_DATA);
    fs::write(dir.join("run.cfg"), "# comment\nepochs = 1\nlr=0.01\nhidden=4\n").unwrap();
    ok(dir, &["train", "--config", "run.cfg", "--data", "data", "--out", "m", "--lr", "0.02"]);
    let receipt = fs::read_to_string(dir.join("m/run_config.txt")).unwrap();
    for line in ["epochs=1", "lr=0.02", "hidden=4", "batch=2", "mapping=sqrt"] {
        assert!(receipt.lines().any(|l| l == line), "{line} missing from {receipt}");
    }
    assert_eq!(fs::read_to_string(dir.join("m/losses.csv")).unwrap().lines().count(), 1 + 3);

    // a receipt is itself a valid config and reproduces the run
    ok(dir, &["train", "--config", "m/run_config.txt", "--out", "m2"]);
    assert!(fs::read(dir.join("m/model.e2pc")).unwrap() == fs::read(dir.join("m2/model.e2pc")).unwrap());
}

#[test]
fn errors_are_one_categorized_line() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();

    let out = e2p(dir, &["train", "--bogus"]);
    assert_eq!(error_line(&out), "usage");
    assert_eq!(out.status.code(), Some(2));

    let out = e2p(dir, &["train", "--out", "m"]);
    assert_eq!(error_line(&out), "usage");
    assert_eq!(out.status.code(), Some(2));

    let out = e2p(dir, &["train", "--data", "missing", "--out", "m"]);
    assert_eq!(error_line(&out), "io");
    assert_eq!(out.status.code(), Some(1));

    fs::write(dir.join("bad.cfg"), "colour=blue\n").unwrap();
    assert_eq!(error_line(&e2p(dir, &["train", "--config", "bad.cfg"])), "config");

    assert_eq!(error_line(&e2p(dir, &["quant-analyze", "--mapping", "cube"])), "config");
    assert_eq!(error_line(&e2p(dir, &["quant-analyze", "--range", "5:1"])), "quant");

    let out = Command::new(env!("CARGO_BIN_EXE_e2p")).current_dir(dir).env("E2P_THREADS", "0").arg("grad-check").output().unwrap();
    assert_eq!(error_line(&out), "config");

    ok(dir, TINY_DATA);
    ok(dir, TINY_TRAIN);
    let out = e2p(dir, &["infer", "--ckpt", "model/model.e2pc", "--data", "data/val", "--out", "p", "--hidden", "8,8"]);
    assert_eq!(error_line(&out), "shape");
    let bytes = fs::read(dir.join("model/model.e2pc")).unwrap();
    fs::write(dir.join("model/model.e2pc"), &bytes[..bytes.len() - 5]).unwrap();
    let out = e2p(dir, &["infer", "--ckpt", "model/model.e2pc", "--data", "data/val", "--out", "p"]);
    assert_eq!(error_line(&out), "checkpoint");

    let out = e2p(dir, &["gen-data", "--out", "data"]);
    assert_eq!(error_line(&out), "data");
}

#[test]
fn quant_analyze_reports_improvements() {
    let tmp = TempDir::new().unwrap();
    let text = ok(tmp.path(), &["quant-analyze", "--samples", "10000", "--power-sweep", "--out", "q"]);
    let rows: Vec<Vec<&str>> = text.lines().skip(1).take(4).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows[1][..2], ["sqrt", "[0.1, 10]"]);
    assert_eq!(rows[1][4], "0.2602");
    assert_eq!(rows[3][4], "0.5777");
    assert_eq!(text.matches("argmin p = 0.5\n").count(), 2);
    for f in ["quant.tsv", "quant.svg", "power_sweep.svg", "run_config.txt"] {
        assert!(tmp.path().join("q").join(f).is_file(), "{f}");
    }
}

#[test]
fn help_exits_zero() {
    let tmp = TempDir::new().unwrap();
    let out = e2p(tmp.path(), &["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["quant-analyze", "gen-data", "train", "infer", "eval", "steps-sweep", "grad-check"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}
