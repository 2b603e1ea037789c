use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::augment::{augment, AugmentConfig, Mode};
use super::config::{Head, Profile, TrainConfig};
use super::optim::{lr_at, Adam};
use crate::data::PoseDataset;
use crate::geometry::losses;
use crate::model::{Model, ORIENTATION_PREFIX, POSITION_PREFIX};
use crate::nn::Ctx;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Independent random streams of a run. Each draw site gets its own stream
/// keyed by `(seed, stream, epoch, index)`, so results do not depend on the
/// order in which samples are processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Shuffle = 1,
    Augment = 2,
    Dropout = 3,
    HeadInit = 4,
}

pub fn stream_rng(seed: u64, stream: Stream, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[24..].copy_from_slice(&(index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Mean losses over one epoch's samples, the loss weights at the end of the
/// epoch and the learning rate used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    #[serde(rename = "L_x")]
    pub l_x: f64,
    #[serde(rename = "L_q")]
    pub l_q: f64,
    #[serde(rename = "L_p")]
    pub l_p: f64,
    pub s_x: f64,
    pub s_q: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub curve: Vec<EpochStats>,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    Combined,
    Position,
    Orientation,
}

struct Schedule {
    epochs: usize,
    lr: f64,
    weight_decay: f64,
}

/// First stage: trains every parameter, including the loss weights, on the
/// combined loss. The loss weights start from the config's `s_x0`, `s_q0`.
pub fn train_stage1(
    model: &mut Model,
    data: &PoseDataset,
    config: &TrainConfig,
    aug: &AugmentConfig,
) -> Result<TrainReport> {
    model.set_loss_weights(config.initial_loss_weights());
    model.store.unfreeze_all();
    let schedule = Schedule {
        epochs: config.epochs(),
        lr: config.lr,
        weight_decay: config.weight_decay,
    };
    run(model, data, config, aug, &schedule, Objective::Combined)
}

/// Second stage: fine-tunes one regression head on its own loss with every
/// other parameter frozen. For outdoor scenes the orientation head is first
/// widened to read the position token as well.
pub fn train_stage2(
    model: &mut Model,
    data: &PoseDataset,
    config: &TrainConfig,
    aug: &AugmentConfig,
    head: Head,
) -> Result<TrainReport> {
    let (prefix, objective) = match head {
        Head::Position => (format!("{POSITION_PREFIX}head."), Objective::Position),
        Head::Orientation => (format!("{ORIENTATION_PREFIX}head."), Objective::Orientation),
    };
    if head == Head::Orientation && config.profile == Profile::Outdoor {
        let seed = stream_rng(config.seed, Stream::HeadInit, 0, 0).next_u64();
        model.enable_orientation_prior(seed);
    }
    model.store.freeze_except(|name| name.starts_with(&prefix));
    let schedule = Schedule {
        epochs: config.stage2_epochs(),
        lr: config.stage2_lr(),
        weight_decay: config.stage2_weight_decay(),
    };
    let report = run(model, data, config, aug, &schedule, objective);
    model.store.unfreeze_all();
    report
}

fn run(
    model: &mut Model,
    data: &PoseDataset,
    config: &TrainConfig,
    aug: &AugmentConfig,
    schedule: &Schedule,
    objective: Objective,
) -> Result<TrainReport> {
    config.validate()?;
    aug.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if aug.crop != model.config.input_size {
        return Err(Error::Config(format!(
            "augmentation crop {} does not match the model input size {}",
            aug.crop, model.config.input_size
        )));
    }
    let mut adam = Adam::new(config.adam());
    let mut report = TrainReport::default();
    let n = data.len();
    for epoch in 0..schedule.epochs {
        let lr = lr_at(epoch, schedule.lr, config.lr_decay, config.decay_period());
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(config.seed, Stream::Shuffle, epoch, 0));
        let mut sums = [0.0; 3];
        for batch in order.chunks(config.batch_size) {
            model.store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let l = sample_step(model, data, config, aug, objective, epoch, i, scale).map_err(
                    |e| match e {
                        Error::Numeric(detail) => Error::Diverged {
                            epoch,
                            step: report.steps,
                            detail,
                        },
                        other => other,
                    },
                )?;
                if !l.iter().all(|v| v.is_finite()) {
                    return Err(Error::Diverged {
                        epoch,
                        step: report.steps,
                        detail: format!("non-finite loss at sample {i}: {l:?}"),
                    });
                }
                sums.iter_mut().zip(l).for_each(|(s, v)| *s += v);
            }
            adam.step(&mut model.store, lr, schedule.weight_decay)?;
            report.steps += 1;
        }
        let w = model.loss_weights();
        let stats = EpochStats {
            epoch,
            l_x: sums[0] / n as f64,
            l_q: sums[1] / n as f64,
            l_p: sums[2] / n as f64,
            s_x: w.s_x,
            s_q: w.s_q,
            lr,
        };
        log::debug!("{stats:?}");
        report.curve.push(stats);
    }
    model.store.zero_grad();
    Ok(report)
}

/// Forward and backward pass for one sample, accumulating `scale` times the
/// objective's gradient into the store. Returns `[L_x, L_q, L_p]`.
#[allow(clippy::too_many_arguments)]
fn sample_step(
    model: &mut Model,
    data: &PoseDataset,
    config: &TrainConfig,
    aug: &AugmentConfig,
    objective: Objective,
    epoch: usize,
    index: usize,
    scale: f64,
) -> Result<[f64; 3]> {
    let sample = &data.samples[index];
    let mut aug_rng = stream_rng(config.seed, Stream::Augment, epoch, index);
    let image = augment(&sample.image, aug, Mode::Train, &mut aug_rng)?;
    model.check_input(&image)?;
    let drop_rng = stream_rng(config.seed, Stream::Dropout, epoch, index);
    let mut cx = Ctx::new(&model.store, true, drop_rng);
    let img = cx.tape.constant(image);
    let out = model.forward(&mut cx, img)?;
    let x_gt = cx.tape.constant(Tensor::vector(&sample.pose.x));
    let q_gt = cx.tape.constant(Tensor::vector(&sample.pose.q));
    let l_x = losses::position(&mut cx.tape, out.x, x_gt)?;
    let l_q = losses::orientation(&mut cx.tape, out.q, q_gt)?;
    let s_x = cx.param(model.s_x);
    let s_q = cx.param(model.s_q);
    let l_p = losses::combined(&mut cx.tape, l_x, l_q, s_x, s_q)?;
    let target = match objective {
        Objective::Combined => l_p,
        Objective::Position => l_x,
        Objective::Orientation => l_q,
    };
    let values = [l_x, l_q, l_p].map(|v| cx.tape.value(v).data()[0]);
    let scaled = cx.tape.scale(target, scale);
    cx.tape.backward(scaled)?;
    let (tape, binding) = cx.into_parts();
    binding.accumulate(&tape, &mut model.store);
    Ok(values)
}

/// Writes `epoch,L_x,L_q,L_p,s_x,s_q,lr` rows.
pub fn write_loss_curve(path: &Path, curve: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for s in curve {
        w.serialize(s).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Eval(format!("{}: {other:?}", path.display())),
    }
}
