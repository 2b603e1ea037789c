use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::PoseDataset;
use crate::geometry::{angular_error_deg, position_loss, Pose};
use crate::model::Model;
use crate::train::{augment, AugmentConfig, Mode};
use crate::{Error, Result};

/// A prediction paired with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub image_id: String,
    pub predicted: Pose,
    pub ground_truth: Pose,
}

impl EvalRecord {
    pub fn new(image_id: impl Into<String>, predicted: Pose, ground_truth: Pose) -> Result<Self> {
        let gt = Pose::ground_truth(ground_truth.x, ground_truth.q)?;
        Ok(EvalRecord {
            image_id: image_id.into(),
            predicted,
            ground_truth: gt,
        })
    }

    pub fn position_error(&self) -> f64 {
        position_loss(&self.predicted.x, &self.ground_truth.x)
    }

    pub fn angular_error(&self) -> Result<f64> {
        angular_error_deg(&self.predicted.q, &self.ground_truth.q)
    }
}

/// Median of a non-empty sample; even counts average the two middle values.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Eval("median of an empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median position error and median angular error (degrees).
pub fn scene_medians(records: &[EvalRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::Eval("no records to summarize".into()));
    }
    let pos: Vec<f64> = records.iter().map(EvalRecord::position_error).collect();
    let ang = records
        .iter()
        .map(EvalRecord::angular_error)
        .collect::<Result<Vec<_>>>()?;
    Ok((median(&pos)?, median(&ang)?))
}

/// Predicts every sample through the test-time preprocessing (resize and
/// centre crop).
pub fn evaluate(model: &Model, data: &PoseDataset, aug: &AugmentConfig) -> Result<Vec<EvalRecord>> {
    if data.is_empty() {
        return Err(Error::Eval("evaluation dataset is empty".into()));
    }
    // the test path draws nothing; the stream only satisfies the signature
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    data.samples
        .iter()
        .map(|s| {
            let image = augment(&s.image, aug, Mode::Test, &mut rng)?;
            let p = model.predict(&image)?;
            EvalRecord::new(s.id(), p.pose, s.pose)
        })
        .collect()
}
