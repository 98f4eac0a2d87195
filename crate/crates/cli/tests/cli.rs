use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &["--set", "dim=8", "--max-len", "6", "--set", "ff_dim=16", "--epochs", "2", "--batch-size", "8"];

fn freqrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freqrec")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"))
}

fn synth(dir: &Path) -> PathBuf {
    let path = dir.join("synth.txt");
    let o = freqrec(&[
        "gen-synth",
        "--out",
        path.to_str().unwrap(),
        "--users",
        "20",
        "--seq-len",
        "8",
        "--items",
        "10",
        "--cycles",
        "2",
        "--noise",
        "0.1",
        "--seed",
        "3",
    ]);
    let text = stdout(&o);
    assert_eq!(value(&text, "users"), "20");
    assert_eq!(value(&text, "interactions"), "160");
    path
}

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL.iter().copied()).collect()
}

#[test]
fn train_then_evaluate_reproduces_test_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    let metrics = dir.path().join("metrics.txt");
    let args = with_small(&[
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        metrics.to_str().unwrap(),
        "--eval-k",
        "5,10",
    ]);
    let trained = stdout(&freqrec(&args));
    assert_eq!(std::fs::read_to_string(&metrics).unwrap(), trained);
    assert_eq!(value(&trained, "test.users"), "20");
    let evaluated = stdout(&freqrec(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
    ]));
    for key in ["hr@5", "hr@10", "ndcg@5", "ndcg@10"] {
        assert_eq!(value(&evaluated, key), value(&trained, &format!("test.{key}")), "{key}");
    }
    let bucketed = stdout(&freqrec(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--split",
        "valid",
        "--buckets",
        "3-7,8-8",
    ]));
    assert_eq!(value(&bucketed, "bucket[8,8].users"), "20");
    assert_eq!(value(&bucketed, "hr@10"), value(&trained, "valid.hr@10"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# desk run\nalpha = 0.2\nepochs = 1\nfusion = serial\n").unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let mut args = with_small(&[
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    args.extend(["--alpha", "0.9"]);
    stdout(&freqrec(&args));
    let saved = std::fs::read_to_string(&ckpt).unwrap();
    assert!(saved.contains("config alpha = 0.9\n"));
    assert!(saved.contains("config fusion = serial\n"));
    assert!(saved.contains("config epochs = 2\n"));
}

#[test]
fn invalid_settings_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let d = data.to_str().unwrap();
    for bad in [
        vec!["train", "--dataset", d, "--alpha", "1.5"],
        vec!["train", "--dataset", d, "--distance", "cosine"],
        vec!["train", "--dataset", d, "--disable", "gsa,bogus"],
        vec!["gridsearch", "--dataset", d, "--grid", "depth=2"],
    ] {
        let o = freqrec(&bad);
        assert_eq!(o.status.code(), Some(2), "{bad:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
    }
    let missing = freqrec(&["train", "--dataset", "/nonexistent/data.txt"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn evaluate_rejects_larger_catalogue() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    let mut args = with_small(&["train", "--dataset", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    args.extend(["--set", "epochs=0"]);
    stdout(&freqrec(&args));
    let bigger = dir.path().join("bigger.txt");
    std::fs::write(&bigger, "1 1\n1 2\n1 50\n").unwrap();
    let o = freqrec(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", bigger.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn gridsearch_writes_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let table_path = dir.path().join("grid.tsv");
    let args = with_small(&[
        "gridsearch",
        "--dataset",
        data.to_str().unwrap(),
        "--grid",
        "alpha=0.3,0.7;fusion=parallel,serial",
        "--out",
        table_path.to_str().unwrap(),
    ]);
    let table = stdout(&freqrec(&args));
    assert_eq!(std::fs::read_to_string(&table_path).unwrap(), table);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("alpha\tfusion\t"));
    let columns = lines[0].split('\t').count();
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == columns));
}

#[test]
fn ablate_and_graft_report_every_arm() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let d = data.to_str().unwrap();
    let table = stdout(&freqrec(&with_small(&["ablate", "--dataset", d, "--variants", "full;gsa,lsr"])));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("full\t"));
    assert!(lines[2].starts_with("w/o GSA+LSR\t"));
    let graft = stdout(&freqrec(&with_small(&["graft-lf", "--dataset", d, "--beta", "0.5"])));
    assert_eq!(value(&graft, "beta"), "0.5");
    value(&graft, "baseline.hr@10");
    value(&graft, "with_lf.ndcg@20");
    value(&graft, "improvement.hr@10");
}
