use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qcnn(args: &[&str], data_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcnn"))
        .args(args)
        .env("QCNN_DATA_DIR", data_dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn idx_images(count: usize, side: usize, fill: impl Fn(usize, usize) -> u8) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [2051u32, count as u32, side as u32, side as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    for i in 0..count {
        for p in 0..side * side {
            b.push(fill(i, p));
        }
    }
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [2049u32, labels.len() as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(labels);
    b
}

/// A 28×28 stand-in for the MNIST files with a few images per split.
fn synthetic_mnist(root: &Path) {
    let dir = root.join("mnist");
    fs::create_dir_all(&dir).unwrap();
    for (split, count) in [("train", 20), ("test", 10)] {
        let labels: Vec<u8> = (0..count).map(|i| (i % 10) as u8).collect();
        let images = idx_images(count, 28, |i, p| ((i * 13 + p * 7) % 256) as u8);
        fs::write(dir.join(format!("{split}-images")), images).unwrap();
        fs::write(dir.join(format!("{split}-labels")), idx_labels(&labels)).unwrap();
    }
}

#[test]
fn verify_fast_passes_and_a_perturbation_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = qcnn(&["verify", "fast"], tmp.path());
    assert!(ok.status.success(), "{}{}", stdout(&ok), stderr(&ok));
    assert!(stdout(&ok).contains("all"));
    assert!(!stdout(&ok).contains("FAIL"));
    let bad = qcnn(&["verify", "fast", "--perturb", "1e-3"], tmp.path());
    assert!(!bad.status.success());
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn train_banner_reports_parameter_count_and_entropy_reads_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    synthetic_mnist(tmp.path());
    let out = tmp.path().join("run");
    let o = qcnn(
        &["train", "--d", "18", "--epochs", "0", "--out", out.to_str().unwrap()],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("81000 parameters"), "{}", stdout(&o));
    let ckpt = out.join("checkpoint.json");
    let report = tmp.path().join("ee.json");
    let e = qcnn(
        &["entropy", "--checkpoint", ckpt.to_str().unwrap(), "--out", report.to_str().unwrap()],
        tmp.path(),
    );
    assert!(e.status.success(), "{}", stderr(&e));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["per_class"].as_array().unwrap().len(), 10);
    assert!(json["average"].as_f64().unwrap() < 0.2);
    let ev = qcnn(
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--contract", "3"],
        tmp.path(),
    );
    assert!(ev.status.success(), "{}", stderr(&ev));
    assert!(stdout(&ev).contains("contraction on 3 images"));
}

#[test]
fn corrupt_data_fails_naming_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    synthetic_mnist(tmp.path());
    let bad = tmp.path().join("mnist/test-labels");
    fs::write(&bad, [0u8, 0, 8]).unwrap();
    let o = qcnn(
        &["train", "--epochs", "1", "--out", tmp.path().join("run").to_str().unwrap()],
        tmp.path(),
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("test-labels"), "{}", stderr(&o));
}

#[test]
fn plot_reports_a_negative_correlation_and_survives_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let header = "epoch,lr,train_cost,test_cost,train_acc,test_acc,ee_class_0,ee_class_1,ee_class_2,ee_class_3,ee_class_4,ee_class_5,ee_class_6,ee_class_7,ee_class_8,ee_class_9,ee_avg";
    let mut csv = String::from(header);
    for epoch in 0..=12 {
        let cost = 1.0 / (1.0 + epoch as f64);
        let ee = 0.05 * epoch as f64;
        let classes = vec![format!("{ee}"); 10].join(",");
        csv.push_str(&format!("\n{epoch},0.01,{cost},{cost},0.5,0.5,{classes},{ee}"));
    }
    let metrics = tmp.path().join("metrics.csv");
    fs::write(&metrics, &csv).unwrap();
    let o = qcnn(&["plot", "--metrics", metrics.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let r: f64 = text
        .split("= ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(r < 0.0, "{text}");
    for f in ["accuracy.svg", "cost.svg", "entropy.svg", "ee_vs_cost.svg"] {
        assert!(tmp.path().join(f).is_file(), "{f}");
    }

    let single = tmp.path().join("one/metrics.csv");
    fs::create_dir_all(single.parent().unwrap()).unwrap();
    fs::write(&single, csv.lines().take(2).collect::<Vec<_>>().join("\n")).unwrap();
    let o = qcnn(&["plot", "--metrics", single.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("undefined"));
}

#[test]
fn config_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"train": {"batch_size": "fifty"}}"#).unwrap();
    let o = qcnn(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("train.batch_size"), "{}", stderr(&o));
    fs::write(&cfg, r#"{"train": {"batch_size": 0}}"#).unwrap();
    let o = qcnn(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(stderr(&o).contains("train.batch_size"), "{}", stderr(&o));
    fs::write(&cfg, r#"{"model": {"sidee": 16}}"#).unwrap();
    let o = qcnn(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(stderr(&o).contains("sidee"), "{}", stderr(&o));
}
