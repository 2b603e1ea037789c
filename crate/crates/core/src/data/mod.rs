//! Pose-labelled image collections and the synthetic scene renderer.

mod dataset;
pub mod listing;
mod synthetic;

pub use dataset::{load_dataset, load_rgb, save_rgb, PoseDataset, Sample, Split};
pub use listing::ListingRecord;
pub use synthetic::{
    generate_synthetic_dataset, render, Landmark, SceneConfig, SyntheticScene, BACKGROUND,
};
