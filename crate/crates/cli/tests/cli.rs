use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mmlstm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmlstm"))
        .args(args)
        .env("MMLSTM_REPORT_DIR", dir.join("reports"))
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mmlstm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    mmlstm(dir, args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset with scenes under `<tmp>/data`.
fn small_data() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(
        dir.path(),
        &["synth", "--out", s(&data), "--train-per-class", "40", "--test-per-class", "20", "--scenes", "12"],
    );
    (dir, data)
}

fn train(dir: &Path, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let ckpt = dir.join(format!("{name}.ckpt"));
    let mut args = vec!["train", "--data", s(data), "--out", s(&ckpt), "--epochs", "2"];
    args.extend_from_slice(extra);
    ok(dir, &args);
    ckpt
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_default_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let stdout = ok(dir.path(), &["synth", "--out", s(&data)]);
    assert!(stdout.contains("train modality 0  0:2000 1:2000 2:2000 3:2000 4:2000"), "{stdout}");
    assert!(stdout.contains("train modality 1  0:2000 1:2000 2:2000 3:2000 4:2000"), "{stdout}");
    let manifest = fs::read_to_string(data.join("train.pool")).unwrap();
    assert!(manifest.starts_with("MMPOOL v1 modalities=2 count=10000\n"), "{}", &manifest[..60]);
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "synth".to_string(),
            "--out".into(),
            s(out).into(),
            "--seed".into(),
            "5".into(),
            "--train-per-class".into(),
            "6".into(),
            "--test-per-class".into(),
            "4".into(),
            "--scenes".into(),
            "3".into(),
        ]
    };
    for name in ["a", "b"] {
        let a = args(&dir.path().join(name));
        let a: Vec<&str> = a.iter().map(String::as_str).collect();
        ok(dir.path(), &a);
    }
    assert_eq!(tree(&dir.path().join("a")), tree(&dir.path().join("b")));
}

#[test]
fn config_errors_exit_2_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(dir.path(), &["synth", "--out", s(&data), "--classes", "1"]), 2);
    assert!(!data.exists());

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(code(dir.path(), &["--config", s(&cfg), "synth", "--out", s(&data)]), 2);
    fs::write(&cfg, "[train]\nclip = -1.0\n").unwrap();
    assert_eq!(code(dir.path(), &["--config", s(&cfg), "synth", "--out", s(&data)]), 2);
    assert!(!data.exists());
    assert_eq!(code(dir.path(), &["train", "--data", "x", "--out", "y", "--variant", "both"]), 2);
}

#[test]
fn data_and_io_errors_have_distinct_codes() {
    let (dir, data) = small_data();
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(code(dir.path(), &["train", "--data", "/nonexistent", "--out", s(&ckpt)]), 5);
    let pool = data.join("train.pool");
    let text = fs::read_to_string(&pool).unwrap().replace("count=200", "count=201");
    fs::write(&pool, text).unwrap();
    assert_eq!(code(dir.path(), &["train", "--data", s(&data), "--out", s(&ckpt)]), 3);
    assert!(!ckpt.exists());
}

#[test]
fn train_selects_architecture_and_logs_metrics() {
    let (dir, data) = small_data();
    for (variant, arch) in [("full", "full"), ("half", "half"), ("none", "none"), ("single", "single")] {
        let ckpt = train(dir.path(), &data, variant, &["--variant", variant]);
        let manifest = fs::read_to_string(&ckpt).unwrap();
        assert!(manifest.contains(&format!("architecture = \"{arch}\"")), "{manifest}");
        if variant == "single" {
            assert!(manifest.contains("d_x = [16]"), "{manifest}");
        } else {
            assert!(manifest.contains("d_x = [16, 8]"), "{manifest}");
        }
        assert!(manifest.contains("[synth]"), "{manifest}");
        let log = fs::read_to_string(dir.path().join(format!("{variant}.ckpt.metrics.jsonl"))).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(log.starts_with("{\"epoch\":1,"), "{log}");
    }
}

#[test]
fn zero_learning_rate_gives_flat_loss() {
    let (dir, data) = small_data();
    train(dir.path(), &data, "flat", &["--lr", "0"]);
    let log = fs::read_to_string(dir.path().join("flat.ckpt.metrics.jsonl")).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"].as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 2);
    assert!(losses.iter().all(|l| (l - losses[0]).abs() < 1e-12), "{losses:?}");
}

#[test]
fn gradcheck_exit_codes_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["gradcheck", "--configs", "4"]);
    for arch in ["single", "full", "half", "none"] {
        assert!(stdout.contains(arch), "{stdout}");
    }
    assert!(stdout.contains("worst"), "{stdout}");
    let report = fs::read_to_string(dir.path().join("reports/gradcheck.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 4 + 3 * 5);

    let out = mmlstm(dir.path(), &["gradcheck", "--configs", "2", "--variant", "half", "--corrupt"]);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gradient check failed: half"), "{err}");
    assert!(err.contains('['), "{err}");
}

#[test]
fn eval_roc_rows_and_determinism() {
    let (dir, data) = small_data();
    let ckpt = train(dir.path(), &data, "full", &[]);
    let args = ["eval-roc", "--model", s(&ckpt), "--data", s(&data), "--m-list", "0,5,20", "--per-kind", "50"];
    let first = ok(dir.path(), &args);
    let tsv = fs::read_to_string(dir.path().join("reports/full.roc.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 4);
    assert!(tsv.starts_with("m\tfar\taccuracy"), "{tsv}");
    let jsonl = fs::read_to_string(dir.path().join("reports/full.roc.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 3);
    let second = ok(dir.path(), &args);
    assert_eq!(first, second);
    assert_eq!(tsv, fs::read_to_string(dir.path().join("reports/full.roc.tsv")).unwrap());

    assert_eq!(
        code(dir.path(), &["eval-roc", "--model", s(&ckpt), "--data", s(&data), "--m-list", "21", "--per-kind", "5"]),
        2
    );
    let single = train(dir.path(), &data, "single", &["--variant", "single"]);
    assert_eq!(code(dir.path(), &["eval-roc", "--model", s(&single), "--data", s(&data)]), 2);
}

#[test]
fn eval_scenes_table_shape() {
    let (dir, data) = small_data();
    let full = train(dir.path(), &data, "full", &[]);
    let none = train(dir.path(), &data, "none", &["--variant", "none"]);
    let scenes = data.join("scenes.scenes");
    let args = ["eval-scenes", "--model", s(&full), s(&none), "--scenes", s(&scenes)];
    let stdout = ok(dir.path(), &args);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(
        lines[0].split_whitespace().collect::<Vec<_>>(),
        ["model", "0.5s", "1.0s", "1.5s", "2.0s", "2.5s", "3.0s"]
    );
    for (line, name) in lines[1..4].iter().zip(["full", "none", "chance"]) {
        let cells: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cells[0], name);
        assert_eq!(cells.len(), 7);
    }
    let tsv = fs::read_to_string(dir.path().join("reports/scenes.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 4);
    assert_eq!(stdout, ok(dir.path(), &args));

    let narrow = ok(dir.path(), &["eval-scenes", "--model", s(&full), "--scenes", s(&scenes), "--vote-window", "2.0"]);
    assert!(narrow.lines().next().unwrap().ends_with("2.0s"), "{narrow}");
    assert_eq!(
        code(dir.path(), &["eval-scenes", "--model", s(&full), "--scenes", s(&scenes), "--vote-window", "0.7"]),
        2
    );
}

#[test]
fn predict_prints_labels() {
    let (dir, data) = small_data();
    let ckpt = train(dir.path(), &data, "lin", &["--variant", "linear"]);
    let stdout = ok(dir.path(), &["predict", "--model", s(&ckpt), "--data", s(&data), "--limit", "5"]);
    assert_eq!(stdout.lines().count(), 7, "{stdout}");
    assert!(stdout.contains("accuracy"), "{stdout}");
}
