mod common;

use common::{cli, write_png_dataset};

const HEAD_ONLY_CONFIG: &str = "learning_rate = 1e-3\nbatch_size = 4\nmax_epochs = 2\npolicy = \"head_only\"\ninput_size = 75\nseed = 3\ndeterministic = true\n";

#[test]
fn inspect_reports_parameter_totals() {
    let (code, out) = cli(&["inspect", "--input-size", "150"]);
    assert_eq!(code, 0);
    assert!(out.contains("Total params: 22,475,427"));
    assert!(out.contains("Trainable params: 22,454,051"));
    assert!(out.contains("Non-trainable params: 21,376"));
    assert!(out.contains("flatten       [11520]"));

    let (_, out) = cli(&["inspect", "--input-size", "75", "--summary"]);
    assert!(out.contains("flatten       [1280]"));
    let (_, out) = cli(&["inspect", "--policy", "head_only", "--summary"]);
    assert!(out.contains("Trainable params: 11,800,579"));
}

#[test]
fn exit_codes() {
    assert_eq!(cli(&["inspect", "--no-such-flag"]).0, 1);
    assert_eq!(cli(&["frobnicate"]).0, 1);
    assert_eq!(cli(&["--help"]).0, 0);
    assert_eq!(cli(&["inspect", "--input-size", "40"]).0, 2);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.csv");
    assert_eq!(cli(&["evaluate", "--manifest", missing.to_str().unwrap(), "--weights", "x.tgw"]).0, 2);
}

#[test]
fn predict_with_zero_head_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    write_png_dataset(dir.path(), 1, 90, 1);
    let weights = dir.path().join("zero.tgw");
    let (code, _) = cli(&["weights", "export", "--out", weights.to_str().unwrap(), "--input-size", "75", "--zero-head"]);
    assert_eq!(code, 0);
    let image = dir.path().join("glioma_0.png");
    let (code, out) = cli(&["predict", "--image", image.to_str().unwrap(), "--weights", weights.to_str().unwrap()]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "glioma");
    for line in &lines[1..] {
        assert!(line.ends_with(" 0.333333"), "{line}");
    }
}

#[test]
fn weights_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.tgw");
    let b = dir.path().join("b.tgw");
    assert_eq!(cli(&["weights", "export", "--out", a.to_str().unwrap(), "--input-size", "75", "--seed", "7"]).0, 0);
    let (code, out) = cli(&["weights", "import", "--file", a.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.contains("input 75x75"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let mut bytes = std::fs::read(&a).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&b, bytes).unwrap();
    assert_eq!(cli(&["weights", "import", "--file", b.to_str().unwrap()]).0, 2);
}

#[test]
fn train_evaluate_and_preview() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_png_dataset(dir.path(), 5, 96, 2);
    let config = dir.path().join("train.toml");
    std::fs::write(&config, HEAD_ONLY_CONFIG).unwrap();
    let run = dir.path().join("run");
    let (code, out) = cli(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{out}");
    for f in ["weights.tgw", "run_report.json", "history.csv", "metrics.json", "confusion.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("run_report.json")).unwrap()).unwrap();
    assert_eq!(report["dataset"]["train"], 12);
    assert_eq!(report["dataset"]["val"], 3);
    assert_eq!(report["config"]["adam"]["epsilon"], 1e-7);
    assert_eq!(report["config"]["augmentation"]["rotation_max"], 15.0);
    assert_eq!(report["early_stopping"]["monitor"], "val_loss");

    let weights = run.join("weights.tgw");
    let (code, out) = cli(&[
        "evaluate",
        "--manifest",
        manifest.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
        "--split",
        "val",
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let json_end = out.rfind('}').unwrap() + 1;
    let metrics: serde_json::Value = serde_json::from_str(&out[..json_end]).unwrap();
    let train_metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics, train_metrics);

    let preview = dir.path().join("preview");
    let (code, _) = cli(&[
        "augment-preview",
        "--manifest",
        manifest.to_str().unwrap(),
        "--n",
        "4",
        "--out",
        preview.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let params = std::fs::read_to_string(preview.join("params.csv")).unwrap();
    assert_eq!(params.lines().count(), 5);
    let img = image::open(preview.join("aug_0000.png")).unwrap();
    assert_eq!((img.width(), img.height()), (150, 150));
}

#[test]
fn bad_manifest_label_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.csv");
    std::fs::write(&manifest, "path,label,split\na.png,glioma,\nb.png,astrocytoma,\n").unwrap();
    let out = dir.path().join("run");
    let code = cli(&["train", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]).0;
    assert_eq!(code, 2);
    let err = tumornet::data::load_manifest(&manifest).unwrap_err().to_string();
    assert!(err.contains("line 3") && err.contains("astrocytoma"), "{err}");
}
