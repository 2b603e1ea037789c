//! Median-error metrics, averaged rankings across scenes, comparison with a
//! baseline, and attention heatmap export.

mod heatmap;
mod metrics;
mod ranking;
pub mod reference;

pub use heatmap::{export_heatmap, write_heatmap, BranchKind, HeatmapArtifact};
pub use metrics::{evaluate, median, scene_medians, EvalRecord};
pub use ranking::{
    aggregate_and_rank, aggregate_and_rank_with, baseline_comparison, competition_ranks,
    parse_results, read_results, write_ranking, write_results, BaselineComparison, MethodTable,
    RankOptions, RankedMethod, SceneDelta, SceneResult,
};
