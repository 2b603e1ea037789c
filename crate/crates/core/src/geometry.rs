//! Camera poses, pose losses and pose error metrics.
//!
//! Quaternions are stored `(w, x, y, z)` everywhere, including files. A pose's
//! quaternion rotates camera-frame vectors into the world frame and `x` is the
//! camera centre in world coordinates.

use std::f64::consts::PI;

use crate::tensor::{Tape, Var};
use crate::{Error, Result};

/// Tolerance on `|q| = 1` for quaternions accepted as ground truth.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Norms below this are treated as zero when normalizing a prediction.
pub const MIN_QUAT_NORM: f64 = 1e-12;

pub type Quat = [f64; 4];
pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: Vec3,
    pub q: Quat,
}

impl Pose {
    /// A pose with no constraint on `q`, as produced by a regressor.
    pub fn new(x: Vec3, q: Quat) -> Self {
        Pose { x, q }
    }

    /// A ground-truth pose; `q` must be unit length within [`UNIT_TOLERANCE`].
    pub fn ground_truth(x: Vec3, q: Quat) -> Result<Self> {
        let n = quat_norm(&q);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Contract(format!(
                "ground-truth quaternion {q:?} has norm {n}"
            )));
        }
        Ok(Pose { x, q })
    }

    pub fn identity() -> Self {
        Pose {
            x: [0.0; 3],
            q: IDENTITY_QUAT,
        }
    }

    /// Same pose with `q` renormalized and flipped into the `w >= 0` half.
    pub fn canonicalized(&self) -> Result<Self> {
        Ok(Pose {
            x: self.x,
            q: canonical_quat(&self.q)?,
        })
    }
}

/// Learned log-variance weights of the two pose losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub s_x: f64,
    pub s_q: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            s_x: 0.0,
            s_q: -3.0,
        }
    }
}

pub fn quat_norm(q: &Quat) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn normalize_quat(q: &Quat) -> Result<Quat> {
    let n = quat_norm(q);
    if !(n > MIN_QUAT_NORM) || !n.is_finite() {
        return Err(Error::Numeric(format!("cannot normalize quaternion {q:?}")));
    }
    Ok(q.map(|v| v / n))
}

/// Unit quaternion with a nonnegative scalar part. Quaternions already unit
/// to within a few ulps are left unscaled, which makes this idempotent
/// bit for bit.
pub fn canonical_quat(q: &Quat) -> Result<Quat> {
    let u = if (quat_norm(q) - 1.0).abs() <= 4.0 * f64::EPSILON {
        *q
    } else {
        normalize_quat(q)?
    };
    Ok(if u[0] < 0.0 { u.map(|v| -v) } else { u })
}

/// Hamilton product `a * b`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Rotation by `angle` radians about `axis` (normalized internally).
pub fn quat_from_axis_angle(axis: &Vec3, angle: f64) -> Quat {
    let n = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (s, c) = (0.5 * angle).sin_cos();
    if n == 0.0 {
        return IDENTITY_QUAT;
    }
    [c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n]
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `||x_gt - x_pred||_2`.
pub fn position_loss(x_pred: &Vec3, x_gt: &Vec3) -> f64 {
    euclidean(x_gt, x_pred)
}

/// `||q_gt - q_pred / ||q_pred|| ||_2`. No double-cover handling: `-q_gt`
/// scores 2.
pub fn orientation_loss(q_pred: &Quat, q_gt: &Quat) -> Result<f64> {
    let u = normalize_quat(q_pred)?;
    Ok(euclidean(q_gt, &u))
}

/// `L_x exp(-s_x) + s_x + L_q exp(-s_q) + s_q`.
pub fn combined_loss(l_x: f64, l_q: f64, w: LossWeights) -> f64 {
    l_x * (-w.s_x).exp() + w.s_x + l_q * (-w.s_q).exp() + w.s_q
}

/// Rotation angle in degrees between the rotations of `q_pred` and `q_gt`,
/// in `[0, 180]`; `q` and `-q` are the same rotation.
pub fn angular_error_deg(q_pred: &Quat, q_gt: &Quat) -> Result<f64> {
    let u = normalize_quat(q_pred)?;
    let g = normalize_quat(q_gt)?;
    let dot: f64 = u.iter().zip(&g).map(|(a, b)| a * b).sum();
    Ok(2.0 * dot.abs().clamp(0.0, 1.0).acos() * 180.0 / PI)
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_rotmat(q: &Quat) -> Result<Mat3> {
    let n = quat_norm(q);
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::Contract(format!(
            "quat_to_rotmat needs a unit quaternion, got norm {n}"
        )));
    }
    let [w, x, y, z] = *q;
    Ok([
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ])
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

pub fn mat_t_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [0, 1, 2].map(|c| m[0][c] * v[0] + m[1][c] * v[1] + m[2][c] * v[2])
}

/// Differentiable versions of the pose losses, recorded on a [`Tape`].
pub mod losses {
    use super::*;

    /// Position loss between a `[3]` prediction and a `[3]` target.
    pub fn position(tape: &mut Tape, x_pred: Var, x_gt: Var) -> Result<Var> {
        let d = tape.sub(x_gt, x_pred)?;
        Ok(tape.norm(d))
    }

    /// Orientation loss between a `[4]` prediction and a unit `[4]` target.
    pub fn orientation(tape: &mut Tape, q_pred: Var, q_gt: Var) -> Result<Var> {
        let n = tape.norm(q_pred);
        let nv = tape.value(n).data()[0];
        if !(nv > MIN_QUAT_NORM) || !nv.is_finite() {
            return Err(Error::Numeric(format!(
                "predicted quaternion has norm {nv}"
            )));
        }
        let unit = tape.div_scalar(q_pred, n)?;
        let d = tape.sub(q_gt, unit)?;
        Ok(tape.norm(d))
    }

    /// Learned-weight combination of two scalar losses with scalar `s_x`,
    /// `s_q` variables.
    pub fn combined(tape: &mut Tape, l_x: Var, l_q: Var, s_x: Var, s_q: Var) -> Result<Var> {
        let term = |tape: &mut Tape, l: Var, s: Var| -> Result<Var> {
            let ns = tape.neg(s);
            let w = tape.exp(ns);
            let lw = tape.mul(l, w)?;
            Ok(tape.add(lw, s)?)
        };
        let a = term(tape, l_x, s_x)?;
        let b = term(tape, l_q, s_q)?;
        Ok(tape.add(a, b)?)
    }
}
