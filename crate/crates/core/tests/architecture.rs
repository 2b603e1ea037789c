mod common;

use attnpose::eval::{export_heatmap, BranchKind};
use attnpose::model::{
    cell_index, extract_token_attention, Endpoint, Model, ModelConfig, ORIENTATION_PREFIX,
    POSITION_PREFIX,
};
use attnpose::nn::Ctx;
use proptest::prelude::*;

fn desk_image(seed: u64) -> attnpose::tensor::Tensor {
    common::random_tensor(&[3, 64, 64], seed).map(|v| 0.5 + 0.5 * v)
}

#[test]
fn attention_rows_sum_to_one() {
    let model = Model::new(ModelConfig::desk(), 3).unwrap();
    let p = model.predict(&desk_image(1)).unwrap();
    for a in p.position_attention.iter().chain(&p.orientation_attention) {
        let len = a.shape()[2];
        for row in a.data().chunks(len) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-9, "{s}");
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn sequence_length_is_cells_plus_token() {
    for config in [ModelConfig::tiny(), ModelConfig::desk()] {
        let model = Model::new(config.clone(), 0).unwrap();
        let s = config.input_size;
        let image = common::random_tensor(&[3, s, s], 2);
        let mut cx = Ctx::eval(&model.store);
        let img = cx.tape.constant(image);
        let features = model.backbone.forward(&mut cx, img).unwrap();
        for branch in [&model.position, &model.orientation] {
            let map = features.get(branch.endpoint);
            let (h, w) = config.endpoint_grid(branch.endpoint);
            assert_eq!((map.height, map.width), (h, w));
            assert_eq!(map.channels, config.endpoint_channels(branch.endpoint));
            let seq = branch.to_sequence(&mut cx, &map).unwrap();
            assert_eq!(cx.tape.shape(seq), &[h * w + 1, config.dim]);
        }
    }
}

#[test]
fn sequence_rows_follow_cell_order() {
    let model = Model::new(ModelConfig::desk(), 0).unwrap();
    let mut cx = Ctx::eval(&model.store);
    let img = cx.tape.constant(desk_image(4));
    let features = model.backbone.forward(&mut cx, img).unwrap();
    let branch = &model.orientation;
    let map = features.get(branch.endpoint);
    let seq = branch.to_sequence(&mut cx, &map).unwrap();
    let seq = cx.tape.value(seq).clone();
    let raw = cx.tape.value(map.var).clone();
    let proj_w = model.store.value(branch.proj_weight);
    let proj_b = model.store.value(branch.proj_bias);
    let token = model.store.value(branch.token);
    let dim = branch.dim;
    assert_eq!(&seq.data()[..dim], token.data());
    // brute-force 1x1 projection at every cell
    for i in 0..map.height {
        for j in 0..map.width {
            let row = cell_index(i, j, map.width);
            for d in 0..dim {
                let mut acc = proj_b.data()[d];
                for c in 0..map.channels {
                    acc += proj_w.get(&[d, c, 0, 0]) * raw.get(&[c, i, j]);
                }
                assert!((seq.get(&[row, d]) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn encodings_are_table_row_concatenations() {
    let model = Model::new(ModelConfig::desk(), 5).unwrap();
    for branch in [&model.position, &model.orientation] {
        let pe = &branch.pos;
        let mut cx = Ctx::eval(&model.store);
        let enc = pe.forward(&mut cx).unwrap();
        let enc = cx.tape.value(enc).clone();
        let cols = model.store.value(pe.cols);
        let rows = model.store.value(pe.rows);
        let half = branch.dim / 2;
        let expect_row = |seq_row: usize, col: usize, row: usize| {
            for k in 0..half {
                assert_eq!(enc.get(&[seq_row, k]), cols.get(&[col, k]));
                assert_eq!(enc.get(&[seq_row, half + k]), rows.get(&[row, k]));
            }
        };
        assert_eq!(enc.shape(), &[pe.height * pe.width + 1, branch.dim]);
        expect_row(0, 0, 0);
        for i in 0..pe.height {
            for j in 0..pe.width {
                expect_row(cell_index(i, j, pe.width), j + 1, i + 1);
            }
        }
    }
}

#[test]
fn positional_parameter_count() {
    for config in [
        ModelConfig::tiny(),
        ModelConfig::desk(),
        ModelConfig::default(),
    ] {
        let model = Model::new(config.clone(), 0).unwrap();
        for (prefix, e) in [
            (POSITION_PREFIX, config.position_map),
            (ORIENTATION_PREFIX, config.orientation_map),
        ] {
            let count: usize = model
                .store
                .iter()
                .filter(|(_, name, _)| name.starts_with(&format!("{prefix}pos.")))
                .map(|(_, _, p)| p.value.numel())
                .sum();
            let (h, w) = config.endpoint_grid(e);
            assert_eq!(count, (h + w + 2) * config.dim / 2, "{prefix}");
        }
    }
}

#[test]
fn full_size_grids() {
    let c = ModelConfig::default();
    assert_eq!(c.endpoint_grid(c.position_map), (14, 14));
    assert_eq!(c.endpoint_grid(c.orientation_map), (28, 28));
    assert_eq!(c.endpoint_channels(Endpoint::Rdct3), 40);
    assert_eq!(c.endpoint_channels(Endpoint::Rdct4), 112);
}

#[test]
fn full_size_heatmaps() {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let image = common::random_tensor(&[3, 224, 224], 8).map(|v| 0.5 + 0.5 * v);
    let p = model.predict(&image).unwrap();
    for (attn, grid, kind, side) in [
        (
            &p.position_attention,
            p.position_grid,
            BranchKind::Position,
            14,
        ),
        (
            &p.orientation_attention,
            p.orientation_grid,
            BranchKind::Orientation,
            28,
        ),
    ] {
        let heat = extract_token_attention(attn, -1, grid).unwrap();
        assert_eq!(heat.shape(), &[side, side]);
        let art = export_heatmap(&heat, (224, 224), kind).unwrap();
        assert_eq!(art.upsampled.shape(), &[224, 224]);
    }
}

#[test]
fn every_routing_builds_and_runs() {
    for p in Endpoint::ALL {
        for o in Endpoint::ALL {
            let mut c = ModelConfig::desk();
            c.position_map = p;
            c.orientation_map = o;
            let model = Model::new(c.clone(), 0).unwrap();
            let pred = model.predict(&desk_image(6)).unwrap();
            assert_eq!(pred.position_grid, c.endpoint_grid(p));
            assert_eq!(pred.orientation_grid, c.endpoint_grid(o));
            let heat =
                extract_token_attention(&pred.position_attention, -1, pred.position_grid).unwrap();
            assert!((heat.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn orientation_prior_widens_head() {
    let mut model = Model::new(ModelConfig::tiny(), 0).unwrap();
    let dim = model.config.dim;
    model.enable_orientation_prior(1);
    assert_eq!(model.orientation.head.hidden.d_in, 2 * dim);
    assert_eq!(
        model
            .store
            .value(model.orientation.head.hidden.weight)
            .shape()[0],
        2 * dim
    );
    let image = common::random_tensor(&[3, 16, 16], 1);
    model.predict(&image).unwrap();
}

#[test]
fn rejects_wrong_input_shape() {
    let model = Model::new(ModelConfig::tiny(), 0).unwrap();
    let err = model
        .predict(&common::random_tensor(&[3, 32, 32], 1))
        .unwrap_err();
    assert!(matches!(err, attnpose::Error::Contract(_)), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_rows_normalized_for_any_input(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let model = Model::new(ModelConfig::tiny(), seed).unwrap();
        let image = common::random_tensor(&[3, 16, 16], seed).map(|v| v * scale);
        let p = model.predict(&image).unwrap();
        for a in p.position_attention.iter().chain(&p.orientation_attention) {
            let len = a.shape()[2];
            for row in a.data().chunks(len) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}
