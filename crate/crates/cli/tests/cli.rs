use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mizero_core::align::ModelFile;
use serde_json::Value;

fn mizero(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mizero")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "{}", stderr(&o));
    o
}

fn error_line(o: &Output) -> String {
    stderr(o).lines().find(|l| l.starts_with("error kind=")).unwrap_or_default().to_string()
}

fn planted(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("data");
    let mut args = vec!["synth", "planted", "--out-dir", s(&out), "--slides-per-class", "10", "--n", "300"];
    args.extend_from_slice(extra);
    ok(mizero(&args));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let o = ok(mizero(&["--help"]));
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["classify", "evaluate", "build-classifier", "align", "score-map", "bench", "synth"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    ok(mizero(&["--version"]));
}

#[test]
fn argument_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = planted(dir.path(), &[]);
    let (manifest, clf, out) = (data.join("manifest.json"), data.join("classifier.json"), dir.path().join("p.json"));
    let base = ["classify", "--manifest", s(&manifest), "--classifier", s(&clf), "--out", s(&out)];
    let mut zero_k = base.to_vec();
    zero_k.extend(["--k", "0"]);
    let o = mizero(&zero_k);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error kind=InvalidArgument msg="), "{}", stderr(&o));

    let o = mizero(&["--threads", "0", "bench"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mizero(&["classify", "--manifest", "m.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error kind=InvalidArgument"));
}

#[test]
fn smoothing_without_coordinates_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = planted(dir.path(), &["--no-coords"]);
    let o = mizero(&[
        "classify",
        "--manifest",
        s(&data.join("manifest.json")),
        "--classifier",
        s(&data.join("classifier.json")),
        "--smooth",
        "--out",
        s(&dir.path().join("p.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error kind=MissingCoords"), "{}", stderr(&o));
    assert!(!dir.path().join("p.json").exists());
}

#[test]
fn malformed_bag_exits_3_and_zero_row_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = planted(dir.path(), &[]);
    let mut header = b"MIZB".to_vec();
    header.extend(1u32.to_le_bytes());
    header.extend(0u32.to_le_bytes());
    header.extend(1u64.to_le_bytes());
    header.extend(8u32.to_le_bytes());
    let mut zero = header.clone();
    zero.extend([0u8; 32]);
    let mut bad = zero.clone();
    bad[..4].copy_from_slice(b"NOPE");
    fs::write(dir.path().join("zero.mizb"), zero).unwrap();
    fs::write(dir.path().join("bad.mizb"), bad).unwrap();
    let run = |bag: &str| {
        mizero(&[
            "score-map",
            "--bag",
            s(&dir.path().join(bag)),
            "--classifier",
            s(&data.join("classifier.json")),
            "--out",
            s(&dir.path().join("m.csv")),
        ])
    };
    let o = run("bad.mizb");
    assert_eq!(o.status.code(), Some(3));
    let line = error_line(&o);
    assert!(line.starts_with("error kind=BadMagic") && line.contains("bad.mizb"), "{line}");
    let o = run("zero.mizb");
    assert_eq!(o.status.code(), Some(4));
    assert!(error_line(&o).starts_with("error kind=ZeroVector"));
}

#[test]
fn planted_classification_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = planted(dir.path(), &[]);
    let out = dir.path().join("p.json");
    ok(mizero(&[
        "classify",
        "--manifest",
        s(&data.join("manifest.json")),
        "--classifier",
        s(&data.join("classifier.json")),
        "--out",
        s(&out),
    ]));
    let doc = json(&out);
    assert_eq!(doc["balanced_accuracy"], 1.0);
    let preds = doc["predictions"].as_array().unwrap();
    assert_eq!(preds.len(), 20);
    assert!(preds.iter().all(|p| p["label"] == p["predicted_label"]));
    assert!(doc["inputs"]["files"]["classifier"]["sha256"].is_string());
}

#[test]
fn rebuilt_trial_classifier_reproduces_the_reported_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let data = planted(dir.path(), &["--text-noise", "1.5"]);
    let report = dir.path().join("r.json");
    let csv = dir.path().join("r.csv");
    let pool = data.join("pool.json");
    let table = data.join("text_table.jsonl");
    ok(mizero(&[
        "evaluate",
        "--manifest",
        s(&data.join("manifest.json")),
        "--pool-file",
        s(&pool),
        "--text-table",
        s(&table),
        "--trials",
        "8",
        "--pool",
        "mean",
        "--report",
        s(&report),
        "--trials-csv",
        s(&csv),
    ]));
    let r = json(&report);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 9);
    for trial in r["trials"].as_array().unwrap().iter().take(3) {
        let seed = trial["trial_seed"].as_u64().unwrap().to_string();
        let clf = dir.path().join(format!("c{seed}.json"));
        ok(mizero(&["build-classifier", "--pool-file", s(&pool), "--text-table", s(&table), "--trial-seed", &seed, "--out", s(&clf)]));
        let pred = dir.path().join("p.json");
        ok(mizero(&[
            "classify",
            "--manifest",
            s(&data.join("manifest.json")),
            "--classifier",
            s(&clf),
            "--pool",
            "mean",
            "--out",
            s(&pred),
        ]));
        assert_eq!(json(&pred)["balanced_accuracy"], trial["balanced_accuracy"]);
        assert_eq!(json(&pred)["confusion"], trial["confusion"]);
    }
}

#[test]
fn k_sweep_reports_every_k() {
    let dir = tempfile::tempdir().unwrap();
    let data = planted(dir.path(), &[]);
    let report = dir.path().join("sweep.json");
    ok(mizero(&[
        "evaluate",
        "--manifest",
        s(&data.join("manifest.json")),
        "--pool-file",
        s(&data.join("pool.json")),
        "--text-table",
        s(&data.join("text_table.jsonl")),
        "--trials",
        "3",
        "--k-sweep",
        "--report",
        s(&report),
    ]));
    let r = json(&report);
    assert_eq!(r["k_values"], serde_json::json!([1, 5, 10, 50, 100]));
    assert_eq!(r["reports"].as_array().unwrap().len(), 5);
}

#[test]
fn score_map_has_one_row_per_patch() {
    let dir = tempfile::tempdir().unwrap();
    let data = planted(dir.path(), &[]);
    let out = dir.path().join("m.csv");
    ok(mizero(&[
        "score-map",
        "--bag",
        s(&data.join("slide_00000.mizb")),
        "--classifier",
        s(&data.join("classifier.json")),
        "--smooth",
        "--out",
        s(&out),
    ]));
    let text = fs::read_to_string(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("col,row,score_class0,score_class1"));
    assert_eq!(lines.count(), 300);
}

#[test]
fn align_writes_a_loadable_model_and_loss_trace() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.mizp");
    let model = dir.path().join("model.json");
    ok(mizero(&["synth", "pairs", "--out", s(&pairs), "--m", "64", "--d-img", "12", "--d-txt", "10"]));
    ok(mizero(&[
        "--threads",
        "1",
        "align",
        "--pairs",
        s(&pairs),
        "--dim-shared",
        "8",
        "--batch",
        "16",
        "--max-steps",
        "30",
        "--lr",
        "1e-3",
        "--out",
        s(&model),
    ]));
    let m = ModelFile::read(&model).unwrap().to_model::<f64>().unwrap();
    assert_eq!((m.d_img(), m.d_txt(), m.d_shared()), (12, 10, 8));
    let trace = fs::read_to_string(dir.path().join("model.loss.csv")).unwrap();
    assert_eq!(trace.lines().count(), 31);
    assert_eq!(json(&model)["provenance"]["files"]["pairs"]["sha256"].as_str().unwrap().len(), 64);
}
