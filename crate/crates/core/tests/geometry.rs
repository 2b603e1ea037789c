use attnpose::geometry::*;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use proptest::prelude::*;

fn na(q: &Quat) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

fn quat() -> impl Strategy<Value = Quat> {
    prop::array::uniform4(-1.0f64..1.0).prop_filter("away from zero", |q| quat_norm(q) > 0.1)
}

fn trace_angle_deg(a: &Quat, b: &Quat) -> f64 {
    // angle of R_a^T R_b from its trace
    let ra = quat_to_rotmat(&normalize_quat(a).unwrap()).unwrap();
    let rb = quat_to_rotmat(&normalize_quat(b).unwrap()).unwrap();
    let mut tr = 0.0;
    for i in 0..3 {
        for k in 0..3 {
            tr += ra[k][i] * rb[k][i];
        }
    }
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

#[test]
fn quarter_turn_about_z() {
    let h = std::f64::consts::FRAC_PI_4;
    let q = [h.cos(), 0.0, 0.0, h.sin()];
    let e = angular_error_deg(&q, &IDENTITY_QUAT).unwrap();
    assert!((e - 90.0).abs() < 1e-9, "{e}");
    assert!((trace_angle_deg(&q, &IDENTITY_QUAT) - 90.0).abs() < 1e-9);
}

#[test]
fn loss_weight_reduction_is_exact() {
    for (lx, lq) in [(0.0, 0.0), (1.25, 0.5), (3.7, 0.013), (1e6, 1e-9)] {
        assert_eq!(
            combined_loss(lx, lq, LossWeights { s_x: 0.0, s_q: 0.0 }),
            lx + lq
        );
    }
}

#[test]
fn combined_loss_closed_form() {
    let w = LossWeights {
        s_x: 0.0,
        s_q: -3.0,
    };
    let v = combined_loss(2.0, 0.1, w);
    assert_eq!(v, 2.0 + 0.1 * 3f64.exp() - 3.0);
    let w = LossWeights { s_x: 1.0, s_q: 2.0 };
    assert_eq!(
        combined_loss(1.0, 1.0, w),
        (-1f64).exp() + 1.0 + (-2f64).exp() + 2.0
    );
}

#[test]
fn orientation_loss_ignores_double_cover() {
    let g = [0.5, 0.5, -0.5, 0.5];
    assert!(orientation_loss(&g, &g).unwrap() < 1e-15);
    let neg = g.map(|v| -v);
    assert!((orientation_loss(&neg, &g).unwrap() - 2.0).abs() < 1e-15);
    assert_eq!(
        angular_error_deg(&neg, &g).unwrap(),
        angular_error_deg(&g, &g).unwrap()
    );
}

#[test]
fn zero_quaternion_is_rejected() {
    assert!(orientation_loss(&[0.0; 4], &IDENTITY_QUAT).is_err());
    assert!(angular_error_deg(&[0.0; 4], &IDENTITY_QUAT).is_err());
    assert!(normalize_quat(&[0.0; 4]).is_err());
}

proptest! {
    #[test]
    fn orientation_loss_scale_invariant(q in quat(), g in quat(), k in 1e-3f64..1e3) {
        let g = normalize_quat(&g).unwrap();
        let a = orientation_loss(&q, &g).unwrap();
        let b = orientation_loss(&q.map(|v| v * k), &g).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{a} {b}");
    }

    #[test]
    fn angular_error_double_cover_exact(q in quat(), g in quat()) {
        let neg = q.map(|v| -v);
        prop_assert_eq!(angular_error_deg(&q, &g).unwrap(), angular_error_deg(&neg, &g).unwrap());
        prop_assert_eq!(angular_error_deg(&q, &g).unwrap(), angular_error_deg(&q, &g.map(|v| -v)).unwrap());
    }

    #[test]
    fn angular_error_matches_nalgebra(q in quat(), g in quat()) {
        let e = angular_error_deg(&q, &g).unwrap();
        let oracle = na(&q).angle_to(&na(&g)).to_degrees();
        prop_assert!((e - oracle).abs() < 1e-6, "{e} {oracle}");
        prop_assert!((0.0..=180.0).contains(&e));
    }

    #[test]
    fn angular_error_matches_trace(q in quat(), g in quat()) {
        let e = angular_error_deg(&q, &g).unwrap();
        // acos is ill-conditioned near 0 and 180 degrees
        prop_assume!(e > 1.0 && e < 179.0);
        prop_assert!((e - trace_angle_deg(&q, &g)).abs() < 1e-6);
    }

    #[test]
    fn rotation_matrix_matches_nalgebra(q in quat(), v in prop::array::uniform3(-5.0f64..5.0)) {
        let u = normalize_quat(&q).unwrap();
        let r = quat_to_rotmat(&u).unwrap();
        let oracle = na(&u).transform_vector(&Vector3::new(v[0], v[1], v[2]));
        let ours = mat_vec(&r, &v);
        for k in 0..3 {
            prop_assert!((ours[k] - oracle[k]).abs() < 1e-12);
        }
        let back = mat_t_vec(&r, &ours);
        for k in 0..3 {
            prop_assert!((back[k] - v[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn hamilton_product_matches_nalgebra(a in quat(), b in quat()) {
        let ours = quat_mul(&a, &b);
        let o = Quaternion::new(a[0], a[1], a[2], a[3]) * Quaternion::new(b[0], b[1], b[2], b[3]);
        let oracle = [o.w, o.i, o.j, o.k];
        for k in 0..4 {
            prop_assert!((ours[k] - oracle[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn axis_angle_matches_nalgebra(axis in prop::array::uniform3(-1.0f64..1.0), angle in -3.0f64..3.0) {
        prop_assume!(axis.iter().map(|v| v * v).sum::<f64>() > 1e-4);
        let q = quat_from_axis_angle(&axis, angle);
        let o = UnitQuaternion::from_axis_angle(
            &nalgebra::Unit::new_normalize(Vector3::new(axis[0], axis[1], axis[2])),
            angle,
        );
        let e = angular_error_deg(&q, &[o.w, o.i, o.j, o.k]).unwrap();
        prop_assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn canonicalization_is_idempotent(q in quat()) {
        let c = canonical_quat(&q).unwrap();
        prop_assert!(c[0] >= 0.0);
        prop_assert!((quat_norm(&c) - 1.0).abs() < 1e-15);
        prop_assert_eq!(canonical_quat(&c).unwrap(), c);
        prop_assert!(angular_error_deg(&c, &q).unwrap() < 1e-5);
    }

    #[test]
    fn combined_loss_zero_weights_exact(lx in 0.0f64..100.0, lq in 0.0f64..2.0) {
        prop_assert_eq!(combined_loss(lx, lq, LossWeights { s_x: 0.0, s_q: 0.0 }), lx + lq);
    }

    #[test]
    fn position_loss_is_euclidean(a in prop::array::uniform3(-9.0f64..9.0), b in prop::array::uniform3(-9.0f64..9.0)) {
        let oracle = (Vector3::from(a) - Vector3::from(b)).norm();
        prop_assert!((position_loss(&a, &b) - oracle).abs() < 1e-12);
        prop_assert_eq!(position_loss(&a, &b), position_loss(&b, &a));
    }
}
