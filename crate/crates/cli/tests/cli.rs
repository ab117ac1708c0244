use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use gafield::data::io::{read_sample, write_sample, Dtype};
use tempfile::TempDir;

fn gafield(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gafield"))
        .current_dir(dir)
        .env("GAFIELD_THREADS", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gafield(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

/// A small corpus written by `synth` into `dir/data`.
fn small_corpus(dir: &Path, count: usize, points: usize) {
    ok(
        dir,
        &[
            "synth",
            "--out",
            "data",
            "--set",
            &format!("data.corpus.count={count}"),
            "--set",
            &format!("data.corpus.flow.n_surface={points}"),
        ],
    );
}

fn metrics_row(csv: &str, field: &str) -> Vec<f64> {
    let line = csv
        .lines()
        .find(|l| l.starts_with(&format!("{field},")))
        .expect("row present");
    line.split(',').skip(1).map(|v| v.parse().unwrap()).collect()
}

#[test]
fn synth_train_eval_pipeline() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let cfg = desk_config();
    let cfg = cfg.to_str().unwrap();
    let start = Instant::now();
    ok(dir, &["synth", "--config", cfg, "--out", "data"]);
    ok(
        dir,
        &["train", "--config", cfg, "--set", "data.dir=data", "--out", "run"],
    );
    ok(
        dir,
        &[
            "eval",
            "--checkpoint",
            "run/best.ckpt",
            "--data",
            "data",
            "--out",
            "eval",
        ],
    );
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(300), "pipeline took {elapsed:?}");

    for f in [
        "run/last.ckpt",
        "run/best.ckpt",
        "run/loss_log.csv",
        "run/manifest.toml",
        "eval/per_sample.csv",
        "data/manifest.toml",
    ] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let log = std::fs::read_to_string(dir.join("run/loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 51);
    let metrics = std::fs::read_to_string(dir.join("eval/metrics.csv")).unwrap();
    let row = metrics_row(&metrics, "value");
    assert!(row[4] < 0.15, "rel_l2 {}", row[4]);
    assert_eq!(row[6], 8.0);
}

#[test]
fn eval_of_exact_predictions_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    small_corpus(dir, 3, 200);
    std::fs::create_dir(dir.join("pred")).unwrap();
    for entry in std::fs::read_dir(dir.join("data")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "gpc") {
            let mut s = read_sample(&path).unwrap();
            let truth = s.field("pressure").unwrap().clone();
            s.fields.insert("prediction".into(), truth);
            write_sample(&dir.join("pred").join(path.file_name().unwrap()), &s, Dtype::F64).unwrap();
        }
    }
    ok(dir, &["eval", "--predictions", "pred", "--out", "eval"]);
    let metrics = std::fs::read_to_string(dir.join("eval/metrics.csv")).unwrap();
    assert_eq!(metrics_row(&metrics, "value"), vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 3.0]);
}

#[test]
fn manifest_echoes_overrides() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    small_corpus(dir, 2, 128);
    ok(
        dir,
        &[
            "train",
            "--set",
            "data.dir=data",
            "--set",
            "train.coarse_weight=0",
            "--set",
            "train.epochs=1",
            "--set",
            "train.warmup=0",
            "--set",
            "data.holdout_every=0",
            "--out",
            "run",
        ],
    );
    let text = std::fs::read_to_string(dir.join("run/manifest.toml")).unwrap();
    let manifest: toml::Table = toml::from_str(&text).unwrap();
    let train = manifest["config"]["train"].as_table().unwrap();
    assert_eq!(train["coarse_weight"].as_float(), Some(0.0));
    assert_eq!(manifest["command"].as_str(), Some("train"));
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["inputs_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn override_precedence() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("run.toml"), "[train]\nlr = 0.002\nepochs = 7\n").unwrap();
    let text = ok(dir, &["config", "--config", "run.toml", "--set", "train.lr=0.003"]);
    let resolved: toml::Table = toml::from_str(&text).unwrap();
    let train = resolved["train"].as_table().unwrap();
    assert_eq!(train["lr"].as_float(), Some(0.003));
    assert_eq!(train["epochs"].as_integer(), Some(7));
    assert_eq!(train["warmup"].as_integer(), Some(10));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    small_corpus(dir, 3, 160);
    let base = [
        "--set",
        "data.dir=data",
        "--set",
        "train.epochs=4",
        "--set",
        "train.warmup=2",
        "--set",
        "data.holdout_every=0",
    ];
    let with = |extra: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = vec!["train".into()];
        v.extend(base.iter().map(|s| s.to_string()));
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let run = |args: Vec<String>| ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>());
    run(with(&["--out", "a"]));
    run(with(&["--out", "b"]));
    run(with(&["--out", "c", "--max-epochs", "2"]));
    run(with(&["--out", "c", "--resume", "c/last.ckpt"]));
    let read = |p: &str| std::fs::read(dir.join(p)).unwrap();
    assert_eq!(read("a/last.ckpt"), read("b/last.ckpt"));
    assert_eq!(read("a/last.ckpt"), read("c/last.ckpt"));
    assert_eq!(read("a/loss_log.csv"), read("c/loss_log.csv"));
}

#[test]
fn predict_and_drag() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    small_corpus(dir, 2, 200);
    let common = [
        "--set",
        "data.dir=data",
        "--set",
        "train.epochs=2",
        "--set",
        "train.warmup=1",
        "--set",
        "data.holdout_every=0",
    ];
    let mut p = vec!["train", "--out", "p"];
    p.extend(common);
    ok(dir, &p);
    let mut w = vec![
        "train",
        "--out",
        "w",
        "--set",
        "task.kind=wss",
        "--set",
        "model.out_width=3",
        "--set",
        "task.norm_mean=[]",
        "--set",
        "task.norm_std=[]",
    ];
    w.extend(common);
    ok(dir, &w);

    ok(
        dir,
        &[
            "predict",
            "--checkpoint",
            "p/last.ckpt",
            "--input",
            "data/sphere_000.gpc",
            "--out",
            "out/pred.csv",
        ],
    );
    let pred = read_sample(&dir.join("out/pred.csv")).unwrap();
    assert_eq!(pred.field("prediction").unwrap().shape(), &[200, 1]);
    assert!(dir.join("out/pred.manifest.toml").is_file());

    let csv = ok(
        dir,
        &[
            "drag",
            "--pressure",
            "p/last.ckpt",
            "--wss",
            "w/last.ckpt",
            "--input",
            "data/sphere_000.gpc",
            "--out",
            "drag.csv",
            "--chart",
            "drag.json",
        ],
    );
    assert!(csv.starts_with("part,pressure_drag_N,shear_drag_N,area_m2\n"));
    assert!(csv.contains("\nTotal,"));
    assert!(std::fs::read_to_string(dir.join("drag.json"))
        .unwrap()
        .contains("\"parts\""));

    let approx = ok(
        dir,
        &[
            "drag",
            "--pressure",
            "p/last.ckpt",
            "--wss",
            "w/last.ckpt",
            "--input",
            "data/sphere_000.gpc",
            "--out",
            "d2.csv",
            "--total-area",
            "12.0",
        ],
    );
    assert!(approx.starts_with("# areas approximate"));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let code = |args: &[&str]| {
        let out = gafield(dir, args);
        let err = String::from_utf8_lossy(&out.stderr).to_string();
        (out.status.code(), err)
    };
    let (c, err) = code(&["config", "--set", "train.bogus=1"]);
    assert_eq!(c, Some(2));
    assert!(err.starts_with("error[config]: "), "{err}");
    assert_eq!(code(&["train", "--set", "data.dir=missing", "--out", "r"]).0, Some(3));
    assert_eq!(
        code(&["eval", "--checkpoint", "none.ckpt", "--data", ".", "--out", "e"]).0,
        Some(3)
    );

    small_corpus(dir, 2, 128);
    let (c, err) = code(&[
        "train",
        "--set",
        "data.dir=data",
        "--set",
        "train.lr=1e300",
        "--set",
        "train.warmup=0",
        "--set",
        "train.epochs=3",
        "--out",
        "r",
    ]);
    assert_eq!(c, Some(4), "{err}");
    assert!(err.contains("error[divergence]"), "{err}");
}
