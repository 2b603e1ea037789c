//! Synthetic scenes: coloured landmark discs seen through a pinhole camera.
//!
//! Camera frame follows the usual vision convention: `z` forward, `x` right,
//! `y` down. A world point `P` maps to camera coordinates `R^T (P - x)`
//! where `R` is the rotation of the pose quaternion.

use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{PoseDataset, Sample, Split};
use crate::geometry::{mat_t_vec, quat_from_axis_angle, quat_to_rotmat, Pose, Vec3};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Grey level of pixels not covered by any landmark.
pub const BACKGROUND: f64 = 0.5;

/// Points closer than this to the camera plane are not drawn.
const NEAR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub position: Vec3,
    pub color: [f64; 3],
    /// Disc radius in world units.
    pub radius: f64,
}

/// Knobs of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub seed: u64,
    pub landmarks: usize,
    /// Landmarks are placed with `|x|, |y| <= lateral_extent` and `z` in
    /// `depth_range`.
    pub lateral_extent: f64,
    pub depth_range: [f64; 2],
    /// Camera centres are sampled uniformly in `[-h, h]` per axis.
    pub position_half_extent: [f64; 3],
    /// Maximum rotation angle away from looking down `+z`, degrees. The
    /// default of 8 keeps the image motion caused by rotation comparable to
    /// the motion caused by moving across the position box; wider cones
    /// let rotation dominate and make position much harder to regress.
    pub max_rotation_deg: f64,
    /// Focal length as a fraction of the image side.
    pub focal_ratio: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            landmarks: 12,
            lateral_extent: 3.0,
            depth_range: [4.0, 8.0],
            position_half_extent: [1.0, 1.0, 1.0],
            max_rotation_deg: 8.0,
            focal_ratio: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub landmarks: Vec<Landmark>,
}

impl SyntheticScene {
    /// Places landmarks uniformly in the configured slab, each with its own
    /// hue.
    pub fn new(config: SceneConfig) -> Result<Self> {
        if config.landmarks < 8 {
            return Err(Error::Config(format!(
                "a scene needs at least 8 landmarks, got {}",
                config.landmarks
            )));
        }
        let [z0, z1] = config.depth_range;
        if !(config.lateral_extent > 0.0 && z0 > 0.0 && z0 < z1) {
            return Err(Error::Config("invalid landmark placement ranges".into()));
        }
        if config.focal_ratio <= 0.0 || !(0.0..90.0).contains(&config.max_rotation_deg) {
            return Err(Error::Config("invalid scene camera settings".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.landmarks;
        let landmarks = (0..n)
            .map(|k| Landmark {
                position: [
                    rng.gen_range(-config.lateral_extent..config.lateral_extent),
                    rng.gen_range(-config.lateral_extent..config.lateral_extent),
                    rng.gen_range(z0..z1),
                ],
                color: hue_to_rgb(k as f64 / n as f64),
                radius: rng.gen_range(0.3..0.6),
            })
            .collect();
        Ok(SyntheticScene { config, landmarks })
    }

    pub fn focal(&self, size: usize) -> f64 {
        self.config.focal_ratio * size as f64
    }

    /// Pixel coordinates `(u, v)` and depth of a world point, or `None` when
    /// it lies behind the near plane. `u` grows rightwards, `v` downwards,
    /// and the optical axis hits `(size/2, size/2)`.
    pub fn project(&self, pose: &Pose, p: &Vec3, size: usize) -> Result<Option<(f64, f64, f64)>> {
        let r = quat_to_rotmat(&pose.q)?;
        let d = [p[0] - pose.x[0], p[1] - pose.x[1], p[2] - pose.x[2]];
        let c = mat_t_vec(&r, &d);
        if c[2] <= NEAR {
            return Ok(None);
        }
        let f = self.focal(size);
        let mid = size as f64 / 2.0;
        Ok(Some((f * c[0] / c[2] + mid, f * c[1] / c[2] + mid, c[2])))
    }

    /// Samples a pose uniformly in the position box with a rotation of
    /// uniformly random axis and angle up to the configured maximum.
    pub fn sample_pose(&self, rng: &mut impl Rng) -> Pose {
        let h = self.config.position_half_extent;
        let x = [0, 1, 2].map(|i| {
            if h[i] > 0.0 {
                rng.gen_range(-h[i]..=h[i])
            } else {
                0.0
            }
        });
        let axis = loop {
            let v: Vec3 = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0));
            let n2: f64 = v.iter().map(|a| a * a).sum();
            if n2 > 1e-6 && n2 <= 1.0 {
                break v;
            }
        };
        let angle = rng
            .gen_range(0.0..=self.config.max_rotation_deg)
            .to_radians();
        Pose::new(x, quat_from_axis_angle(&axis, angle))
    }
}

/// Renders a `[3, size, size]` image of the scene seen from `pose`.
///
/// Landmarks are drawn far to near as discs with a one-pixel soft edge over
/// a uniform grey background.
pub fn render(scene: &SyntheticScene, pose: &Pose, size: usize) -> Result<Tensor> {
    if size == 0 {
        return Err(Error::Render("image size must be positive".into()));
    }
    let f = scene.focal(size);
    let mut visible = Vec::new();
    for l in &scene.landmarks {
        if let Some((u, v, depth)) = scene.project(pose, &l.position, size)? {
            visible.push((depth, u, v, f * l.radius / depth, l.color));
        }
    }
    if visible.is_empty() {
        return Err(Error::Render(format!(
            "every landmark is behind the camera at {pose:?}"
        )));
    }
    visible.sort_by(|a, b| b.0.total_cmp(&a.0));

    let plane = size * size;
    let mut data = vec![BACKGROUND; 3 * plane];
    for &(_, u, v, r, color) in &visible {
        let y0 = ((v - r - 1.0).floor().max(0.0)) as usize;
        let y1 = ((v + r + 1.0).ceil().min(size as f64)).max(0.0) as usize;
        let x0 = ((u - r - 1.0).floor().max(0.0)) as usize;
        let x1 = ((u + r + 1.0).ceil().min(size as f64)).max(0.0) as usize;
        for py in y0..y1 {
            for px in x0..x1 {
                let dx = px as f64 + 0.5 - u;
                let dy = py as f64 + 0.5 - v;
                let alpha = (r - (dx * dx + dy * dy).sqrt() + 0.5).clamp(0.0, 1.0);
                if alpha == 0.0 {
                    continue;
                }
                for (c, &col) in color.iter().enumerate() {
                    let p = &mut data[c * plane + py * size + px];
                    *p = *p * (1.0 - alpha) + col * alpha;
                }
            }
        }
    }
    Ok(Tensor::new(vec![3, size, size], data)?)
}

/// Renders `n` poses sampled from the scene with a stream seeded by `seed`.
/// Image paths are `000000.png`, `000001.png`, … so the result can be saved
/// as an ordinary dataset.
pub fn generate_synthetic_dataset(
    scene: &SyntheticScene,
    n: usize,
    size: usize,
    seed: u64,
    split: Split,
) -> Result<PoseDataset> {
    if n == 0 {
        return Err(Error::Config(
            "synthetic dataset size must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let pose = scene.sample_pose(&mut rng);
            Ok(Sample {
                path: PathBuf::from(format!("{i:06}.png")),
                pose,
                image: Arc::new(render(scene, &pose, size)?),
            })
        })
        .collect::<Result<_>>()?;
    Ok(PoseDataset {
        root: PathBuf::new(),
        scene: format!("synthetic-{}", scene.config.seed),
        split,
        samples,
    })
}

/// Fully saturated colour of hue `h ∈ [0, 1)`.
fn hue_to_rgb(h: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    match h6 as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hues_are_distinct() {
        let s = SyntheticScene::new(SceneConfig::default()).unwrap();
        for (i, a) in s.landmarks.iter().enumerate() {
            for b in &s.landmarks[i + 1..] {
                assert_ne!(a.color, b.color);
            }
        }
    }

    #[test]
    fn hue_wheel() {
        assert_eq!(hue_to_rgb(0.0), [1.0, 0.0, 0.0]);
        assert_eq!(hue_to_rgb(1.0 / 3.0), [0.0, 1.0, 0.0]);
        assert_eq!(hue_to_rgb(2.0 / 3.0), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn too_few_landmarks() {
        let c = SceneConfig {
            landmarks: 7,
            ..SceneConfig::default()
        };
        assert!(matches!(SyntheticScene::new(c), Err(Error::Config(_))));
    }
}
