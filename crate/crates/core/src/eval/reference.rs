//! Published per-scene results and ranking tables shipped with the crate.
//!
//! The per-scene files use the results CSV layout; the summary files list the
//! published averages and ranks. The method implemented by this crate appears
//! as [`THIS_METHOD`] and the image-retrieval reference as [`BASELINE`].
//! See `reference/README.md` for sources and the under-bar counting rule.

use std::path::Path;

use serde::Deserialize;

use super::ranking::{parse_results, MethodTable};
use crate::{Error, Result};

pub const BASELINE: &str = "IR Baseline";
pub const THIS_METHOD: &str = "attnpose";

pub const CAMBRIDGE_CSV: &str = include_str!("../../reference/cambridge.csv");
pub const SEVEN_SCENES_CSV: &str = include_str!("../../reference/seven_scenes.csv");
pub const CAMBRIDGE_SUMMARY_CSV: &str = include_str!("../../reference/cambridge_summary.csv");
pub const SEVEN_SCENES_SUMMARY_CSV: &str = include_str!("../../reference/seven_scenes_summary.csv");

/// A published ranking-table row.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PublishedRank {
    pub method: String,
    #[serde(rename = "avg_pos_m")]
    pub avg_pos: f64,
    #[serde(rename = "avg_ang_deg")]
    pub avg_ang: f64,
    pub pos_rank: usize,
    pub ang_rank: usize,
    pub final_rank: usize,
}

pub fn cambridge() -> Vec<MethodTable> {
    parse_results(CAMBRIDGE_CSV, Path::new("reference/cambridge.csv")).expect("bundled table")
}

pub fn seven_scenes() -> Vec<MethodTable> {
    parse_results(SEVEN_SCENES_CSV, Path::new("reference/seven_scenes.csv")).expect("bundled table")
}

pub fn cambridge_summary() -> Vec<PublishedRank> {
    parse_summary(CAMBRIDGE_SUMMARY_CSV).expect("bundled table")
}

pub fn seven_scenes_summary() -> Vec<PublishedRank> {
    parse_summary(SEVEN_SCENES_SUMMARY_CSV).expect("bundled table")
}

pub fn parse_summary(text: &str) -> Result<Vec<PublishedRank>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Eval(format!("summary table: {e}"))))
        .collect()
}

/// Splits reference tables into the baseline and the ranked methods.
pub fn split_baseline(tables: Vec<MethodTable>) -> (Option<MethodTable>, Vec<MethodTable>) {
    let mut baseline = None;
    let mut rest = Vec::new();
    for t in tables {
        if t.method == BASELINE {
            baseline = Some(t);
        } else {
            rest.push(t);
        }
    }
    (baseline, rest)
}
