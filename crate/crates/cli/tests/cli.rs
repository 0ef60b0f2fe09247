use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use landmark_attack_cli::{run, CliError};

const TINY: &str = r#"
seed = 5
[preprocess]
width = 32
height = 32
[codec]
sigma = 3.0
[train]
sigma = 3.0
epochs = 2
batch_size = 4
[data]
train_images = 8
test_images = 3
[data.synth]
width = 32
height = 32
landmarks = 6
cluster_spacing = 5.0
isolated_spacing = 6.0
glyph_radius = 2.0
margin = 3.0
[benchmark]
attempts_per_image = 2
max_images = 3
iteration_grid = [1, 3]
[attack]
iterations = 3
trace_every = 1
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn lm(cfg: &Path, out: &Path, rest: &[&str]) -> Result<PathBuf, CliError> {
    let mut args = vec![
        "lmattack".to_string(),
        "--config".into(),
        cfg.display().to_string(),
        "--out-dir".into(),
        out.display().to_string(),
    ];
    args.extend(rest.iter().map(|s| s.to_string()));
    run(args)
}

fn train(cfg: &Path, out: &Path) -> PathBuf {
    lm(cfg, out, &["train"]).unwrap()
}

fn write_targets(path: &Path, entries: &[(usize, f64, f64)]) {
    let targets: Vec<_> = entries
        .iter()
        .map(|&(index, x, y)| serde_json::json!({ "index": index, "x": x, "y": y }))
        .collect();
    fs::write(path, serde_json::json!({ "image_id": "t", "targets": targets }).to_string()).unwrap();
}

fn first_test_image(dir: &Path, train_dir: &Path) -> PathBuf {
    // any synthetic-looking image of the model's size will do
    let img = image::GrayImage::from_fn(32, 32, |x, y| image::Luma([((x * 7 + y * 3) % 200) as u8 + 20]));
    let p = dir.join("probe.png");
    img.save(&p).unwrap();
    assert!(train_dir.join("model.json").exists());
    p
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_lmattack");
    let ok = Command::new(exe).arg("--help").output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let usage = Command::new(exe).arg("frobnicate").output().unwrap();
    assert_eq!(usage.status.code(), Some(1));
    let missing = Command::new(exe)
        .args(["detect", "--checkpoint", "/nonexistent/model.json", "--image", "/nonexistent.png"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochs = \"many\"\n").unwrap();
    let err = lm(&cfg, dir.path(), &["train"]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    fs::write(&cfg, "[train]\nsigma = 5.0\n").unwrap();
    let err = lm(&cfg, dir.path(), &["train", "--epochs", "1"]).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
}

#[test]
fn training_is_reproducible_from_config_and_seed() {
    let (dir, cfg) = setup();
    let a = train(&cfg, &dir.path().join("a"));
    let b = train(&cfg, &dir.path().join("b"));
    assert_eq!(a.file_name(), b.file_name());
    for f in ["model.json", "training.csv", "eval.csv", "summary.json", "args.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = lm(&cfg, &dir.path().join("c"), &["--seed", "6", "train"]).unwrap();
    assert_ne!(a.file_name(), c.file_name());
    assert_ne!(fs::read(a.join("model.json")).unwrap(), fs::read(c.join("model.json")).unwrap());

    // persisted config reproduces the run
    let d = lm(&a.join("config.toml"), &dir.path().join("d"), &["train"]).unwrap();
    assert_eq!(fs::read(a.join("model.json")).unwrap(), fs::read(d.join("model.json")).unwrap());
}

#[test]
fn warm_start_requires_matching_architecture() {
    let (dir, cfg) = setup();
    let a = train(&cfg, dir.path());
    let ckpt = a.join("model.json");
    let ok = lm(&cfg, dir.path(), &["train", "--epochs", "1", "--init", ckpt.to_str().unwrap()]);
    assert!(ok.is_ok());
    let other = dir.path().join("other.toml");
    fs::write(&other, TINY.replace("landmarks = 6", "landmarks = 7")).unwrap();
    let err = lm(&other, dir.path(), &["train", "--init", ckpt.to_str().unwrap()]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn zero_iteration_attack_leaves_image_unchanged() {
    let (dir, cfg) = setup();
    let t = train(&cfg, dir.path());
    let img = first_test_image(dir.path(), &t);
    let targets = dir.path().join("targets.json");
    write_targets(&targets, &[(2, 16.0, 20.0)]);
    let ckpt = t.join("model.json");
    let out = lm(
        &cfg,
        dir.path(),
        &[
            "attack",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            img.to_str().unwrap(),
            "--targets",
            targets.to_str().unwrap(),
            "--iterations",
            "0",
        ],
    )
    .unwrap();
    assert_eq!(fs::read(out.join("input.png")).unwrap(), fs::read(out.join("adversarial.png")).unwrap());
    let trace: serde_json::Value = serde_json::from_slice(&fs::read(out.join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["clean_landmarks"], trace["final_landmarks"]);

    let vis = lm(&cfg, dir.path(), &["visualize", "--attack-dir", out.to_str().unwrap()]).unwrap();
    let panel = image::open(vis.join("visualization.png")).unwrap().into_rgb8();
    assert_eq!((panel.width(), panel.height()), (96, 32));
}

#[test]
fn attack_rejects_unknown_landmark_and_runs_adaptive() {
    let (dir, cfg) = setup();
    let t = train(&cfg, dir.path());
    let img = first_test_image(dir.path(), &t);
    let ckpt = t.join("model.json");
    let targets = dir.path().join("targets.json");
    let attack = |extra: &[&str]| {
        let mut args = vec![
            "attack",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            img.to_str().unwrap(),
            "--targets",
            targets.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        lm(&cfg, dir.path(), &args)
    };
    write_targets(&targets, &[(7, 10.0, 10.0)]);
    assert_eq!(attack(&[]).unwrap_err().exit_code(), 2);
    write_targets(&targets, &[(0, 10.0, 10.0)]);
    assert_eq!(attack(&[]).unwrap_err().exit_code(), 2);
    write_targets(&targets, &[(1, 40.0, 10.0)]);
    assert_eq!(attack(&[]).unwrap_err().exit_code(), 2);

    write_targets(&targets, &[(1, 12.0, 20.0), (4, 20.0, 14.0)]);
    let out = attack(&["--adaptive", "--epsilon", "4"]).unwrap();
    let trace: serde_json::Value = serde_json::from_slice(&fs::read(out.join("trace.json")).unwrap()).unwrap();
    let means = trace["weight_means"].as_array().unwrap();
    assert_eq!(means.len(), 3);
    for m in means {
        assert!((m.as_f64().unwrap() - 1.0).abs() < 1e-9);
    }
    let a = image::open(out.join("input.png")).unwrap().into_luma8();
    let b = image::open(out.join("adversarial.png")).unwrap().into_luma8();
    let max = a.pixels().zip(b.pixels()).map(|(p, q)| (p.0[0] as i32 - q.0[0] as i32).abs()).max().unwrap();
    assert!(max <= 4, "max level change {max}");
}

#[test]
fn detect_writes_predictions_in_original_frame() {
    let (dir, cfg) = setup();
    let t = train(&cfg, dir.path());
    let img = image::GrayImage::from_pixel(64, 48, image::Luma([90]));
    let p = dir.path().join("big.png");
    img.save(&p).unwrap();
    let out = lm(
        &cfg,
        dir.path(),
        &["detect", "--checkpoint", t.join("model.json").to_str().unwrap(), "--image", p.to_str().unwrap()],
    )
    .unwrap();
    let preds: serde_json::Value = serde_json::from_slice(&fs::read(out.join("predictions.json")).unwrap()).unwrap();
    let pts = preds[0]["original"]["points"].as_array().unwrap();
    assert_eq!(pts.len(), 6);
    for q in pts {
        let (x, y) = (q["x"].as_f64().unwrap(), q["y"].as_f64().unwrap());
        assert!((0.0..64.0).contains(&x) && (0.0..48.0).contains(&y));
    }
}

#[test]
fn benchmark_then_isolation_table_has_one_row_per_landmark() {
    let (dir, cfg) = setup();
    let t = train(&cfg, dir.path());
    let ckpt = t.join("model.json");
    let bench = lm(
        &cfg,
        dir.path(),
        &["benchmark", "--checkpoint", ckpt.to_str().unwrap(), "--cells", "ati:8,ti:8"],
    )
    .unwrap();
    for f in ["sweep.csv", "summary.json", "curves.csv", "curves.svg", "medre.svg", "reports/ati_eps8_it3.csv", "reports/clean.csv"] {
        assert!(bench.join(f).exists(), "{f}");
    }
    let sweep = fs::read_to_string(bench.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 * 2);

    let iso = lm(&cfg, dir.path(), &["isolation", "--benchmark", bench.to_str().unwrap()]).unwrap();
    let table = fs::read_to_string(iso.join("isolation.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 6);
    let all = lm(&cfg, dir.path(), &["isolation", "--benchmark", bench.to_str().unwrap(), "--all-attempts", "--cell", "ti:8"]).unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(all.join("isolation.json")).unwrap()).unwrap();
    assert_eq!(summary["rows"].as_array().unwrap().len(), 6);
    assert!(summary["correlation"].is_number() || summary["correlation"] == "undefined");

    let err = lm(&cfg, dir.path(), &["isolation", "--benchmark", bench.to_str().unwrap(), "--cell", "ti:2"]).unwrap_err();
    assert_eq!(err.exit_code(), 1);

    let again = lm(
        &cfg,
        &dir.path().join("again"),
        &["benchmark", "--checkpoint", ckpt.to_str().unwrap(), "--cells", "ati:8,ti:8"],
    )
    .unwrap();
    assert_eq!(fs::read(bench.join("sweep.csv")).unwrap(), fs::read(again.join("sweep.csv")).unwrap());
}
