mod common;

const TOL: f64 = 1e-4;

#[test]
fn every_primitive() {
    let results = common::primitive_gradchecks();
    assert!(results.len() >= 25);
    for (name, err) in results {
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn end_to_end_combined_loss() {
    let (err, n) = common::end_to_end_check();
    assert!(n > 1000, "{n}");
    assert!(err < TOL, "relative error {err:e} over {n} parameters");
}
