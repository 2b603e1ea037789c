//! Adam, the step learning-rate schedule, image augmentation, and the
//! two-stage training procedure.

mod augment;
mod config;
mod optim;
mod trainer;

pub use augment::{augment, resize_bilinear, resize_smaller_edge, AugmentConfig, Mode};
pub use config::{Head, Profile, TrainConfig};
pub use optim::{lr_at, Adam, AdamConfig, WeightDecay};
pub(crate) use trainer::csv_error;
pub use trainer::{
    stream_rng, train_stage1, train_stage2, write_loss_curve, EpochStats, Stream, TrainReport,
};
