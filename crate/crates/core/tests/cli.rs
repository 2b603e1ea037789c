use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attnpose::data::{generate_synthetic_dataset, SceneConfig, Split, SyntheticScene};
use attnpose::eval::reference::CAMBRIDGE_CSV;
use attnpose::model::{checkpoint, is_position_head, ORIENTATION_HEAD_HIDDEN};

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn attnpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnpose"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = attnpose(args);
    assert!(
        out.status.success(),
        "{args:?}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn train(out: &Path, extra: &[&str]) {
    let config = tiny_config();
    let mut args = vec![
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn train_writes_checkpoint_curve_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &["--epochs", "50"]);
    let model = checkpoint::load(&dir.path().join("model.ckpt")).unwrap();
    assert_eq!(model.config.dim, 8);
    // header plus one row per epoch
    assert_eq!(lines(&dir.path().join("loss.csv")), 51);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["data"][0]["samples"], 32);
}

#[test]
fn same_seed_gives_identical_checkpoints_and_config_reruns_reproduce() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    train(a.path(), &["--epochs", "5", "--seed", "7"]);
    train(b.path(), &["--epochs", "5", "--seed", "7"]);
    let bytes = std::fs::read(a.path().join("model.ckpt")).unwrap();
    assert_eq!(bytes, std::fs::read(b.path().join("model.ckpt")).unwrap());

    let emitted = a.path().join("config.toml");
    ok(&[
        "train",
        "--config",
        emitted.to_str().unwrap(),
        "--out",
        c.path().to_str().unwrap(),
    ]);
    assert_eq!(bytes, std::fs::read(c.path().join("model.ckpt")).unwrap());
    assert_eq!(
        std::fs::read(a.path().join("loss.csv")).unwrap(),
        std::fs::read(c.path().join("loss.csv")).unwrap()
    );
}

#[test]
fn missing_dataset_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let out = attnpose(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--set",
        "data.synthetic=false",
        "--set",
        "data.root=/nonexistent/scene",
        "--set",
        "data.train_listing=dataset_train.txt",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/scene"), "{err}");
    assert!(!dir.path().join("model.ckpt").exists());
}

#[test]
fn finetune_heads() {
    let stage1 = tempfile::tempdir().unwrap();
    train(stage1.path(), &["--epochs", "3"]);
    let ckpt = stage1.path().join("model.ckpt");
    let config = tiny_config();
    let before = checkpoint::load(&ckpt).unwrap();

    let pos = tempfile::tempdir().unwrap();
    ok(&[
        "finetune",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--head",
        "position",
        "--epochs",
        "2",
        "--out",
        pos.path().to_str().unwrap(),
    ]);
    assert_eq!(lines(&pos.path().join("loss.csv")), 3);
    let after = checkpoint::load(&pos.path().join("model.ckpt")).unwrap();
    for ((_, name, a), (_, _, b)) in before.store.iter().zip(after.store.iter()) {
        if !is_position_head(name) {
            assert_eq!(a.value, b.value, "{name} changed");
        }
    }
    let manifest = std::fs::read_to_string(pos.path().join("manifest.json")).unwrap();
    let hash = attnpose::cli::sha256_hex(&std::fs::read(&ckpt).unwrap());
    assert!(manifest.contains(&hash));

    // the default outdoor profile feeds the position token to the orientation head
    let ori = tempfile::tempdir().unwrap();
    ok(&[
        "finetune",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--head",
        "orientation",
        "--epochs",
        "1",
        "--out",
        ori.path().to_str().unwrap(),
    ]);
    let widened = checkpoint::load(&ori.path().join("model.ckpt")).unwrap();
    assert_eq!(
        widened
            .store
            .by_name(ORIENTATION_HEAD_HIDDEN)
            .unwrap()
            .value
            .shape()[0],
        16
    );

    let bad = attnpose(&[
        "finetune",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--head",
        "scale",
        "--out",
        ori.path().to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn eval_results_rankings_and_failures() {
    let stage1 = tempfile::tempdir().unwrap();
    train(stage1.path(), &["--epochs", "2"]);
    let ckpt = stage1.path().join("model.ckpt");
    let config = tiny_config();
    let reference = stage1.path().join("outdoor.csv");
    std::fs::write(&reference, CAMBRIDGE_CSV).unwrap();

    let out = tempfile::tempdir().unwrap();
    let run = ok(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--reference-tables",
        reference.to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    let results = std::fs::read_to_string(out.path().join("results.csv")).unwrap();
    assert!(
        results.starts_with("scene,method,pos_median_m,ang_median_deg"),
        "{results}"
    );
    assert_eq!(results.lines().count(), 2);
    assert_eq!(lines(&out.path().join("errors.csv")), 17);
    let ranking = std::fs::read_to_string(out.path().join("outdoor.ranking.csv")).unwrap();
    assert_eq!(ranking.lines().count(), 11);
    assert!(out.path().join("outdoor.baseline.csv").exists());
    assert!(String::from_utf8_lossy(&run.stdout).contains("8/8 scene cells"));

    let empty = tempfile::tempdir().unwrap();
    let failed = attnpose(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--set",
        "data.test_samples=0",
        "--out",
        empty.path().to_str().unwrap(),
    ]);
    assert!(!failed.status.success());
    assert!(!empty.path().join("results.csv").exists());

    let mismatch = attnpose(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--set",
        "model.dim=16",
        "--set",
        "model.mlp_hidden=16",
        "--out",
        empty.path().to_str().unwrap(),
    ]);
    assert_eq!(
        mismatch.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&mismatch.stderr)
    );
}

#[test]
fn attn_writes_one_heatmap_per_branch() {
    let stage1 = tempfile::tempdir().unwrap();
    train(stage1.path(), &["--epochs", "1"]);
    let scene = SyntheticScene::new(SceneConfig::default()).unwrap();
    let images = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&scene, 1, 24, 3, Split::Test)
        .unwrap()
        .save(images.path(), "dataset_test.txt")
        .unwrap();
    let listing = std::fs::read_to_string(images.path().join("dataset_test.txt")).unwrap();
    let rel = listing
        .lines()
        .find(|l| !l.starts_with('#') && !l.trim().is_empty())
        .and_then(|l| l.split_whitespace().next())
        .unwrap();
    let image = images.path().join(rel);
    let stem = image.file_stem().unwrap().to_string_lossy().into_owned();

    let out = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let ckpt = stage1.path().join("model.ckpt");
    ok(&[
        "attn",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--layer",
        "-2",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    for branch in ["position", "orientation"] {
        let png = out.path().join(format!("{stem}.{branch}.png"));
        let dims = image::image_dimensions(&png).unwrap();
        assert_eq!(dims, (16, 16));
        assert!(out.path().join(format!("{stem}.{branch}.csv")).exists());
    }
}

#[test]
fn ablate_layers_writes_one_row_per_setting() {
    let out = tempfile::tempdir().unwrap();
    let config = tiny_config();
    ok(&[
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--axis",
        "layers",
        "--epochs",
        "1",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    let mut reader = csv::Reader::from_path(out.path().join("ablation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    let values: Vec<&str> = rows.iter().map(|r| &r[1]).collect();
    assert_eq!(values, ["2", "4", "6", "8"]);
    let params: Vec<usize> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(params.windows(2).all(|w| w[0] < w[1]));
    assert!(out.path().join("layers-8/loss.csv").exists());
}
