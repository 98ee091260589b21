use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[model]
n_context = 10
single_block_filters = [16, 8, 8]
context_block_filters = [8, 4]
head_hidden = 8
baseline_hidden = [16, 8]

[eval]
k = 2
"#;

fn gatenet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatenet"))
        .current_dir(dir)
        .env_remove("GATENET_WORKERS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = gatenet(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A scratch directory holding `small.toml` and a synthetic dataset in `syn/samples`.
fn workspace(preset: &str, n: usize, events: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(
        dir.path(),
        &[
            "synth",
            "--preset",
            preset,
            "--set",
            &format!("synth.n_samples={n}"),
            "--set",
            &format!("synth.events_per_sample={events}"),
            "--out",
            "syn",
        ],
    );
    dir
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_one_csv_per_sample() {
    let w = workspace("batch_hard", 5, 50);
    assert_eq!(csv_files(&w.path().join("syn/samples")).len(), 5);
    let manifest = json(&w.path().join("syn/manifest.json"));
    assert_eq!(manifest["command"]["name"], "synth");
    // 5 samples, the class list, the spec and the truth file
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 9);
    assert!(w.path().join("syn/truth.json").exists());
}

#[test]
fn training_loss_drops_tenfold_on_separable_data() {
    let w = workspace("separable", 4, 2000);
    ok(w.path(), &["train", "--config", "small.toml", "--data", "syn/samples", "--out", "run"]);
    let h = json(&w.path().join("run/history.json"));
    let loss: Vec<f64> = h["loss"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let first = loss[0];
    let last = *loss.last().unwrap();
    assert!(first >= 10.0 * last, "loss {first} -> {last}");
    assert!(w.path().join("run/model.ckpt").exists());
    assert!(w.path().join("run/config.toml").exists());
}

#[test]
fn replaying_a_manifest_reproduces_the_checkpoint() {
    let w = workspace("separable", 3, 200);
    ok(w.path(), &["train", "--config", "small.toml", "--data", "syn/samples", "--seed", "9", "--out", "a"]);
    ok(w.path(), &["replay", "a/manifest.json", "--out", "b"]);
    let a = std::fs::read(w.path().join("a/model.ckpt")).unwrap();
    let b = std::fs::read(w.path().join("b/model.ckpt")).unwrap();
    assert_eq!(a, b);
    // the resolved config alone also reproduces it
    ok(w.path(), &["train", "--config", "a/config.toml", "--out", "c"]);
    assert_eq!(a, std::fs::read(w.path().join("c/model.ckpt")).unwrap());
    let digest = &json(&w.path().join("a/manifest.json"))["outputs"];
    let ckpt = digest
        .as_array()
        .unwrap()
        .iter()
        .find(|d| d["path"].as_str().unwrap().ends_with("model.ckpt"))
        .unwrap();
    assert_eq!(ckpt["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn replay_refuses_changed_inputs() {
    let w = workspace("separable", 3, 100);
    ok(w.path(), &["train", "--config", "small.toml", "--data", "syn/samples", "--out", "a"]);
    let sample = w.path().join("syn/samples/synth_000.csv");
    let mut text = std::fs::read_to_string(&sample).unwrap();
    text.push_str(&text.lines().nth(1).unwrap().to_string());
    text.push('\n');
    std::fs::write(&sample, text).unwrap();
    let out = gatenet(w.path(), &["replay", "a/manifest.json", "--out", "b"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth_000.csv"));
}

#[test]
fn missing_label_column_is_a_data_error_naming_file_and_column() {
    let w = workspace("separable", 2, 50);
    let out = gatenet(
        w.path(),
        &["train", "--config", "small.toml", "--data", "syn/samples", "--set", "data.label_column=gate", "--out", "x"],
    );
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("synth_000.csv") && err.contains("`gate`"), "{err}");
}

#[test]
fn config_errors_exit_with_two() {
    let w = workspace("separable", 2, 50);
    for args in [
        &["train", "--data", "syn/samples", "--set", "train.learning_rate=1", "--out", "x"][..],
        &["train", "--data", "syn/samples", "--set", "train.max_lr=-1", "--out", "x"],
        &["synth", "--preset", "spiral", "--out", "x"],
        &["train", "--out", "x"],
        &["frobnicate"],
    ] {
        let out = gatenet(w.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn prediction_outputs_are_consistent() {
    let w = workspace("separable", 3, 300);
    ok(w.path(), &["train", "--config", "small.toml", "--data", "syn/samples", "--out", "run"]);
    let before = std::fs::read(w.path().join("syn/samples/synth_001.csv")).unwrap();
    ok(
        w.path(),
        &[
            "predict",
            "--config",
            "small.toml",
            "--set",
            r#"predict.plot_pairs=[["CD3","CD19"],["FSC","SSC"]]"#,
            "--checkpoint",
            "run/model.ckpt",
            "syn/samples/synth_001.csv",
            "--out",
            "pred",
        ],
    );
    assert_eq!(before, std::fs::read(w.path().join("syn/samples/synth_001.csv")).unwrap());
    let (_, events) = read_csv(&w.path().join("syn/samples/synth_001.csv"));
    let (header, rows) = read_csv(&w.path().join("pred/synth_001.labels.csv"));
    assert_eq!(header, ["event_index", "predicted_class", "probability_A", "probability_B", "probability_C"]);
    assert_eq!(rows.len(), events.len());
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], i.to_string());
        let p: Vec<f64> = r[2..].iter().map(|v| v.parse().unwrap()).collect();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let best = ["A", "B", "C"][(0..3).max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a))).unwrap()];
        assert_eq!(r[1], best);
    }
    let count = |rows: &[Vec<String>], col: usize| {
        let mut c = std::collections::BTreeMap::new();
        for r in rows {
            *c.entry(r[col].clone()).or_insert(0) += 1;
        }
        c
    };
    for pair in ["CD3.CD19", "FSC.SSC"] {
        let (h, plot) = read_csv(&w.path().join(format!("pred/synth_001.plot.{pair}.csv")));
        assert_eq!(h[2], "predicted_class");
        assert_eq!(plot.len(), events.len());
        assert_eq!(count(&plot, 2), count(&rows, 1));
    }
}

#[test]
fn panel_mismatch_lists_missing_markers() {
    let w = workspace("separable", 2, 100);
    ok(w.path(), &["train", "--config", "small.toml", "--data", "syn/samples", "--out", "run"]);
    std::fs::write(w.path().join("other.csv"), "FSC,CD3,SSC\n1,2,3\n").unwrap();
    let out = gatenet(w.path(), &["predict", "--checkpoint", "run/model.ckpt", "other.csv", "--out", "pred"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("CD19") && !err.contains("\"CD3\""), "{err}");
}

#[test]
fn sweep_over_gamma_emits_one_row_per_value() {
    let w = workspace("separable", 4, 100);
    ok(
        w.path(),
        &["sweep", "--config", "small.toml", "--data", "syn/samples", "--param", "gamma", "--values", "0,1,5", "--out", "sw"],
    );
    let (header, rows) = read_csv(&w.path().join("sw/sweep.csv"));
    assert_eq!(header[..2], ["param", "value"]);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r[1].as_str()).collect::<Vec<_>>(), ["0", "1", "5"]);
    let out = gatenet(
        w.path(),
        &["sweep", "--config", "small.toml", "--data", "syn/samples", "--param", "depth", "--values", "1", "--out", "sw2"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cross_validation_reports_and_worker_count_does_not_change_results() {
    let w = workspace("separable", 4, 150);
    ok(w.path(), &["cv", "--config", "small.toml", "--data", "syn/samples", "--out", "cv1"]);
    let out = Command::new(env!("CARGO_BIN_EXE_gatenet"))
        .current_dir(w.path())
        .env("GATENET_WORKERS", "2")
        .args(["cv", "--config", "small.toml", "--data", "syn/samples", "--out", "cv2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let a = std::fs::read(w.path().join("cv1/cv.json")).unwrap();
    let b = std::fs::read(w.path().join("cv2/cv.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(json(&w.path().join("cv2/manifest.json"))["config"]["eval"]["workers"], 2);
    let (_, rows) = read_csv(&w.path().join("cv1/per_sample.csv"));
    assert_eq!(rows.len(), 4);
}

#[test]
fn learning_curve_rows_follow_the_sizes() {
    let w = workspace("separable", 4, 100);
    ok(
        w.path(),
        &["learning-curve", "--config", "small.toml", "--data", "syn/samples", "--sizes", "1,all", "--out", "lc"],
    );
    let (_, rows) = read_csv(&w.path().join("lc/learning_curve.csv"));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["1", "all"]);
    let out = gatenet(
        w.path(),
        &["learning-curve", "--config", "small.toml", "--data", "syn/samples", "--sizes", "3", "--out", "lc2"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identical_experts_agree_perfectly() {
    let w = workspace("batch_hard", 3, 80);
    let mut args = vec!["expert-eval".to_string(), "--experts".to_string()];
    for e in 0..4 {
        let dir = w.path().join(format!("expert{e}"));
        std::fs::create_dir(&dir).unwrap();
        for f in std::fs::read_dir(w.path().join("syn/samples")).unwrap() {
            let f = f.unwrap().path();
            std::fs::copy(&f, dir.join(f.file_name().unwrap())).unwrap();
        }
        args.push(format!("expert{e}"));
    }
    args.extend(["--out".into(), "ex".into()]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(w.path(), &args);
    let (_, rows) = read_csv(&w.path().join("ex/experts.csv"));
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r[1], "1");
        assert_eq!(r[4], "1");
    }
    let out = gatenet(w.path(), &["expert-eval", "--experts", "expert0", "expert1", "--out", "ex2"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bench_reports_throughput() {
    let w = tempfile::tempdir().unwrap();
    std::fs::write(w.path().join("small.toml"), SMALL).unwrap();
    ok(
        w.path(),
        &["bench", "--config", "small.toml", "--set", "bench.events=500", "--set", "bench.repeats=2", "--out", "b"],
    );
    let r = json(&w.path().join("b/bench.json"));
    assert_eq!(r["n_events"], 500);
    assert!(r["events_per_second"].as_f64().unwrap() > 0.0);
}

const HIERARCHY: &str = r#"
[[stages]]
name = "Root"
subpopulations = ["A", "B", "C"]
display_markers = ["FSC", "SSC"]

[[stages]]
name = "Inner"
parent = "A"
subpopulations = ["A1"]
remainder = "Rest"
display_markers = ["CD3", "CD19"]
"#;

const INNER_SPEC: &str = r#"
marker_names = ["FSC", "SSC", "CD3", "CD19"]
n_samples = 2
seed = 5

[[populations]]
class_name = "A1"
mean = [0.0, 0.0, 0.0, 0.0]
covariance = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
frequency = 0.6

[[populations]]
class_name = "Rest"
mean = [0.0, 0.0, 8.0, 0.0]
covariance = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
frequency = 0.4

[batch_effect]
shift_scale = 0.0
gain_range = [1.0, 1.0]
population_jitter = 0.0

[events_per_sample]
median = 200.0
dispersion = 0.0
"#;

#[test]
fn hierarchical_prediction_feeds_parents_to_children() {
    let w = workspace("separable", 2, 300);
    let p = w.path();
    std::fs::write(p.join("inner.toml"), INNER_SPEC).unwrap();
    ok(p, &["synth", "--spec", "inner.toml", "--out", "inner"]);
    ok(p, &["train", "--config", "small.toml", "--data", "syn/samples", "--out", "root"]);
    ok(p, &["train", "--config", "small.toml", "--data", "inner/samples", "--out", "child"]);
    let h = p.join("h");
    std::fs::create_dir(&h).unwrap();
    std::fs::write(h.join("hierarchy.toml"), HIERARCHY).unwrap();
    std::fs::copy(p.join("root/model.ckpt"), h.join("Root.ckpt")).unwrap();
    std::fs::copy(p.join("child/model.ckpt"), h.join("Inner.ckpt")).unwrap();
    ok(p, &["predict", "--hierarchy", "h", "syn/samples/synth_000.csv", "--out", "pred"]);
    let (header, rows) = read_csv(&p.join("pred/synth_000.hierarchy.csv"));
    assert_eq!(header, ["event_index", "population", "Root", "Inner"]);
    assert_eq!(rows.len(), 300);
    for r in &rows {
        assert_eq!(r[3].is_empty(), r[2] != "A", "{r:?}");
        let expected = if r[3] == "A1" { "A1" } else { r[2].as_str() };
        assert_eq!(r[1], expected);
    }
    let (_, inner) = read_csv(&p.join("pred/synth_000.Inner.labels.csv"));
    assert_eq!(inner.len(), rows.iter().filter(|r| r[2] == "A").count());

    // checkpoints whose classes do not match their stage are rejected
    std::fs::copy(p.join("root/model.ckpt"), h.join("Inner.ckpt")).unwrap();
    let out = gatenet(p, &["predict", "--hierarchy", "h", "syn/samples/synth_000.csv", "--out", "pred2"]);
    assert_eq!(out.status.code(), Some(2));
}
