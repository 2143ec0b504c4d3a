use std::path::Path;
use std::process::{Command, Output};

use cofor_core::dataset::read_manifest;
use cofor_core::localize::read_sidecar;
use cofor_core::persist::read_feature_dump;

fn cofor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cofor"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run cofor")
}

fn ok(args: &[&str]) -> String {
    let out = cofor(args);
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "cofor {args:?} failed with {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = cofor(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = cofor(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cofor(&["sweep", "--grid", "colour", "--manifest", "m", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    assert_eq!(cofor(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_manifest_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.jsonl");
    let out = cofor(&["eval", "--model", "m.ck", "--manifest", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn invalid_class_count_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cofor(&["synth", "--out", s(dir.path()), "--classes", "9"]);
    assert_eq!(out.status.code(), Some(1));
}

/// synth, split, train, detect, eval, localize, extract and embed on one small corpus.
#[test]
fn detection_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    let stdout = ok(&["synth", "--out", s(&corpus), "--images-per-class", "40", "--size", "64", "--seed", "3"]);
    assert!(stdout.starts_with("config {"), "{stdout}");
    assert_eq!(read_manifest(corpus.join("manifest.jsonl")).unwrap().len(), 80);

    let split = root.join("split.jsonl");
    ok(&[
        "split", "--manifest", s(&corpus.join("manifest.jsonl")), "--out", s(&split),
        "--fractions", "0.5,0.25,0.25", "--seed", "1",
    ]);
    let records = read_manifest(&split).unwrap();
    assert!(records.iter().all(|r| r.split != cofor_core::Split::Unassigned));

    let model = root.join("det.ck");
    let stdout = ok(&[
        "train", "--manifest", s(&split), "--out", s(&model), "--pairs", "hv", "--epochs", "8",
        "--batch-size", "16", "--batches-per-epoch", "4", "--val-batches", "2",
        "--target-val-accuracy", "1.0", "--seed", "5", "--threads", "1",
    ]);
    let config = stdout.lines().next().unwrap();
    for field in ["\"seed\":5", "\"pairs\":\"hv\"", "\"jpeg\":\"none\"", "\"threads\":1"] {
        assert!(config.contains(field), "{field} missing from {config}");
    }
    assert!(root.join("det_history.csv").exists());
    assert!(stdout.contains("fingerprint"));

    let stdout = ok(&["detect", "--model", s(&model), "--manifest", s(&split), "--split", "test"]);
    assert!(stdout.lines().next().unwrap().contains("\"fingerprint\""));
    let scored = stdout.lines().filter(|l| l.contains("p(generated)=")).count();
    assert_eq!(scored, records.iter().filter(|r| r.split == cofor_core::Split::Test).count());
    let accuracy: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("accuracy "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(accuracy >= 0.95, "{stdout}");

    let report = root.join("report.json");
    let stdout = ok(&["eval", "--model", s(&model), "--manifest", s(&split), "--out", s(&report)]);
    assert!(stdout.contains("equal-prior accuracy"));
    let parsed: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(parsed["accuracy"].as_f64().unwrap() >= 0.95);

    let out = cofor(&["attribute", "--model", s(&model), "--manifest", s(&split)]);
    assert_eq!(out.status.code(), Some(1));

    // Localization writes next to the image unless --out is given.
    let image = records[0].path.clone();
    let copy = root.join("sample.png");
    std::fs::copy(&image, &copy).unwrap();
    ok(&["localize", "--model", s(&model), s(&copy), "--patch-size", "32", "--stride", "8"]);
    let png = root.join("sample_heatmap.png");
    assert!(png.exists());
    let (h, w, scores) = read_sidecar(root.join("sample_heatmap.cfhm")).unwrap();
    assert_eq!((h, w), (64, 64));
    assert!(scores.iter().all(|v| (0.0..=1.0).contains(v)));

    let dump = root.join("feat.bin");
    ok(&["extract", s(&copy), "--out", s(&dump), "--pairs", "h", "--patch-size", "32", "--stride", "16"]);
    let feats = read_feature_dump(&dump).unwrap();
    assert_eq!(feats.len(), 9);
    assert_eq!(feats[4].origin, (16, 16));

    let emb = root.join("embed");
    ok(&[
        "embed", "--model", s(&model), "--manifest", s(&split), "--out", s(&emb), "--cap", "10",
        "--pca-dim", "4", "--perplexity", "4", "--iterations", "300", "--seed", "2",
    ]);
    for f in ["embeddings.jsonl", "layout.csv", "tsne.png", "legend.json", "kl.csv"] {
        assert!(emb.join(f).exists(), "{f}");
    }
    let layout = std::fs::read_to_string(emb.join("layout.csv")).unwrap();
    assert_eq!(layout.lines().count(), 21);
}

#[test]
fn single_thread_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    ok(&["synth", "--out", s(&corpus), "--images-per-class", "6", "--size", "32"]);
    let split = root.join("split.jsonl");
    ok(&["split", "--manifest", s(&corpus.join("manifest.jsonl")), "--out", s(&split), "--fractions", "0.5,0.5,0"]);
    let train = |name: &str| {
        let model = root.join(name);
        ok(&[
            "train", "--manifest", s(&split), "--out", s(&model), "--pairs", "h", "--epochs", "2",
            "--batch-size", "4", "--batches-per-epoch", "1", "--val-batches", "1", "--seed", "9", "--threads", "1",
        ]);
        (std::fs::read(&model).unwrap(), std::fs::read(model.with_file_name(name.replace(".ck", "_history.csv"))).unwrap())
    };
    assert_eq!(train("a.ck"), train("b.ck"));
}

#[test]
fn attribution_and_leave_one_out() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    ok(&["synth", "--out", s(&corpus), "--classes", "3", "--images-per-class", "6", "--size", "32"]);
    let manifest = corpus.join("manifest.jsonl");

    let loo = root.join("loo.jsonl");
    let stdout = ok(&["split", "--manifest", s(&manifest), "--out", s(&loo), "--hold-out", "cyclegan"]);
    assert!(stdout.contains("training classes: real, stargan"));
    for r in read_manifest(&loo).unwrap() {
        if r.label == "cyclegan" {
            assert_eq!(r.split, cofor_core::Split::Test);
        }
    }

    let split = root.join("split.jsonl");
    ok(&["split", "--manifest", s(&manifest), "--out", s(&split), "--fractions", "0.5,0.5,0"]);
    let model = root.join("attr.ck");
    ok(&[
        "train", "--manifest", s(&split), "--out", s(&model), "--head", "attribution", "--pairs", "h",
        "--epochs", "1", "--batch-size", "3", "--batches-per-epoch", "1", "--val-batches", "1",
    ]);
    let stdout = ok(&["attribute", "--model", s(&model), "--manifest", s(&split), "--split", "val"]);
    let line = stdout.lines().find(|l| l.contains("->")).unwrap();
    assert!(line.contains("real=") && line.contains("stargan=") && line.contains("cyclegan="), "{line}");
    assert!(stdout.contains("equal-prior accuracy"));
    let out = cofor(&["detect", "--model", s(&model), "--manifest", s(&split)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_writes_a_grid() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    ok(&["synth", "--out", s(&corpus), "--images-per-class", "6", "--size", "32"]);
    let split = root.join("split.jsonl");
    ok(&["split", "--manifest", s(&corpus.join("manifest.jsonl")), "--out", s(&split), "--fractions", "0.34,0.33,0.33"]);
    let out = root.join("grid.json");
    let stdout = ok(&[
        "sweep", "--grid", "jpeg", "--values", "90,none", "--manifest", s(&split), "--out", s(&out),
        "--pairs", "h", "--epochs", "1", "--batch-size", "2", "--batches-per-epoch", "1", "--val-batches", "1",
    ]);
    assert!(stdout.contains("none"));
    let parsed: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(parsed["cells"].as_array().unwrap().len(), 2);
    assert_eq!(parsed["cells"][0].as_array().unwrap().len(), 2);
}
