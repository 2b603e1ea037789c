use std::path::Path;

use attnpose::data::listing::{format_listing, parse_listing, ListingRecord};
use attnpose::data::{
    generate_synthetic_dataset, load_dataset, SceneConfig, Split, SyntheticScene,
};
use attnpose::geometry::Pose;
use attnpose::model::{checkpoint, Model, ModelConfig};
use proptest::prelude::*;

fn record() -> impl Strategy<Value = ListingRecord> {
    (
        "[a-z]{1,8}/[a-z0-9_]{1,10}\\.png",
        prop::array::uniform3(-1e3f64..1e3),
        prop::array::uniform4(-1.0f64..1.0),
    )
        .prop_filter("non-degenerate quaternion", |(_, _, q)| {
            q.iter().map(|v| v * v).sum::<f64>() > 1e-2
        })
        .prop_map(|(p, x, q)| ListingRecord {
            image: p.into(),
            pose: Pose::new(x, q).canonicalized().unwrap(),
        })
}

proptest! {
    #[test]
    fn listing_round_trips_bit_exactly(records in prop::collection::vec(record(), 1..20)) {
        let text = format_listing(&records);
        let parsed = parse_listing(&text, Path::new("mem")).unwrap();
        prop_assert_eq!(&parsed, &records);
        prop_assert_eq!(format_listing(&parsed), text);
    }
}

#[test]
fn listing_errors_name_the_line() {
    let text = "a.png 0 0 0 1 0 0 0\nb.png 0 0 nan 1 0 0 0\n";
    let err = parse_listing(text, Path::new("list.txt")).unwrap_err();
    assert!(err.to_string().starts_with("list.txt:2:"), "{err}");
    let err = parse_listing("c.png 1 2 3 0 0 0 0\n", Path::new("l")).unwrap_err();
    assert!(matches!(err, attnpose::Error::Parse { line: 1, .. }));
    assert!(parse_listing("d.png 1 2 3\n", Path::new("l")).is_err());
}

#[test]
fn dataset_survives_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let scene = SyntheticScene::new(SceneConfig::default()).unwrap();
    let data = generate_synthetic_dataset(&scene, 6, 24, 3, Split::Test).unwrap();
    data.save(dir.path(), "dataset_test.txt").unwrap();
    let back = load_dataset(dir.path(), &dir.path().join("dataset_test.txt")).unwrap();
    assert_eq!(back.split, Split::Test);
    assert_eq!(back.len(), 6);
    assert_eq!(back.content_hash(), data.content_hash());
    for (a, b) in data.samples.iter().zip(&back.samples) {
        assert_eq!(a.pose, b.pose);
        // 8-bit quantization
        assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn missing_image_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("train.txt"), "nowhere.png 0 0 0 1 0 0 0\n").unwrap();
    let err = load_dataset(dir.path(), &dir.path().join("train.txt")).unwrap_err();
    assert!(err.is_usage());
    assert!(err.to_string().contains("nowhere.png"), "{err}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut config = ModelConfig::tiny();
    config.dropout = 0.1;
    let mut model = Model::new(config, 11).unwrap();
    model.enable_orientation_prior(2);
    let bytes = checkpoint::to_bytes(&model).unwrap();
    let back = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.loss_weights(), model.loss_weights());
    for ((_, na, a), (_, nb, b)) in model.store.iter().zip(back.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.value.shape(), b.value.shape());
        let same = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{na}");
    }
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let image = attnpose::tensor::Tensor::full([3, 16, 16], 0.3);
    let p = checkpoint::load(&path).unwrap().predict(&image).unwrap();
    assert_eq!(p.pose, model.predict(&image).unwrap().pose);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = Model::new(ModelConfig::tiny(), 0).unwrap();
    let bytes = checkpoint::to_bytes(&model).unwrap();
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::from_bytes(&extra).is_err());
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 1;
    assert!(matches!(
        checkpoint::from_bytes(&bad_magic),
        Err(attnpose::Error::Checkpoint(_))
    ));
    let err = checkpoint::load(Path::new("/nonexistent/m.ckpt")).unwrap_err();
    assert!(err.is_usage());
}
