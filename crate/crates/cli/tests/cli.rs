use std::path::Path;
use std::process::{Command, Output};

fn semiseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semiseg")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    let text = format!(
        "data.dir={}\ndata.image_height=16\ndata.image_width=16\ndata.n_samples=12\n\
         split.n_labeled=5\nsplit.n_unlabeled=4\nsplit.n_test=3\n\
         network.base_width=4\nnetwork.depth=2\naugment.m_copies=2\n\
         train.total_epochs=2\ntrain.labeled_batch=2\ntrain.unlabeled_batch=2\n",
        dir.join("data").display()
    );
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn generate_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert!(semiseg(&["generate", "--config", &cfg]).status.success());
    assert!(dir.path().join("data/splits.txt").exists());

    let run = dir.path().join("run");
    let out = semiseg(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoints/final.ckpt");
    assert!(ckpt.exists());

    let out = semiseg(&["evaluate", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--model", "student"]);
    assert!(out.status.success());
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.lines().any(|l| l.starts_with("mean\t")));
    assert_eq!(report.lines().filter(|l| l.starts_with("s0")).count(), 3);
}

#[test]
fn unknown_key_fails_with_a_message() {
    let out = semiseg(&["generate", "--override", "loss.nonsense=1"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("semiseg:") && err.contains("loss.nonsense"), "{err}");
}
