use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::train::csv_error;
use crate::{Error, Result};

/// Median errors of one method on one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub scene: String,
    pub method: String,
    #[serde(rename = "pos_median_m")]
    pub pos: f64,
    #[serde(rename = "ang_median_deg")]
    pub ang: f64,
}

/// Per-scene medians of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodTable {
    pub method: String,
    /// `(scene, position error, angular error)` in table order.
    pub scenes: Vec<(String, f64, f64)>,
}

impl MethodTable {
    pub fn new(method: impl Into<String>, scenes: Vec<(String, f64, f64)>) -> Result<Self> {
        let method = method.into();
        let mut seen = BTreeSet::new();
        for (s, p, a) in &scenes {
            if !(p.is_finite() && a.is_finite() && *p >= 0.0 && *a >= 0.0) {
                return Err(Error::Eval(format!(
                    "{method}/{s}: errors must be finite and nonnegative, got {p}/{a}"
                )));
            }
            if !seen.insert(s.as_str()) {
                return Err(Error::Eval(format!("{method}: scene {s:?} listed twice")));
            }
        }
        Ok(MethodTable { method, scenes })
    }

    pub fn scene_names(&self) -> BTreeSet<&str> {
        self.scenes.iter().map(|(s, _, _)| s.as_str()).collect()
    }

    pub fn get(&self, scene: &str) -> Option<(f64, f64)> {
        self.scenes
            .iter()
            .find(|(s, _, _)| s == scene)
            .map(|&(_, p, a)| (p, a))
    }

    /// Unweighted scene means `(position, angle)`.
    pub fn means(&self) -> (f64, f64) {
        let n = self.scenes.len() as f64;
        let (p, a) = self
            .scenes
            .iter()
            .fold((0.0, 0.0), |(p, a), &(_, sp, sa)| (p + sp, a + sa));
        (p / n, a / n)
    }
}

/// Controls how averages are compared when ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankOptions {
    /// Averages are rounded half-up to this many decimals before ranking,
    /// so methods that tie in a printed table share a rank. `None` ranks the
    /// raw means.
    pub decimals: Option<u32>,
}

impl Default for RankOptions {
    fn default() -> Self {
        RankOptions { decimals: Some(2) }
    }
}

/// One row of a ranking table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedMethod {
    pub method: String,
    pub avg_pos: f64,
    pub avg_ang: f64,
    pub pos_rank: usize,
    pub ang_rank: usize,
    pub mean_rank: f64,
    pub final_rank: usize,
}

/// [`aggregate_and_rank_with`] using the default two-decimal rounding.
pub fn aggregate_and_rank(tables: &[MethodTable]) -> Result<Vec<RankedMethod>> {
    aggregate_and_rank_with(tables, RankOptions::default())
}

/// Averages each method over its scenes and ranks the averages per metric.
///
/// Ranks use standard competition numbering: tied methods share the best
/// rank of the group and the following rank is skipped (1, 2, 2, 4). The
/// final rank is the competition rank of the mean of the two metric ranks.
/// Rows come back ordered by final rank, then position rank, then name.
pub fn aggregate_and_rank_with(
    tables: &[MethodTable],
    opts: RankOptions,
) -> Result<Vec<RankedMethod>> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Eval("no method tables to rank".into()))?;
    let scenes = first.scene_names();
    if scenes.is_empty() {
        return Err(Error::Eval(format!("{} has no scenes", first.method)));
    }
    for t in tables {
        if t.scene_names() != scenes {
            return Err(Error::Eval(format!(
                "{} covers scenes {:?}, expected {:?}",
                t.method,
                t.scene_names(),
                scenes
            )));
        }
    }
    let means: Vec<(f64, f64)> = tables.iter().map(MethodTable::means).collect();
    let key = |v: f64| match opts.decimals {
        Some(d) => {
            // half-up at the printed precision; the nudge absorbs binary
            // representation error such as 0.235 * 100 = 23.4999…
            let scaled = v * 10f64.powi(d as i32);
            (scaled + 0.5 + 1e-9).floor()
        }
        None => v,
    };
    let pos_keys: Vec<f64> = means.iter().map(|m| key(m.0)).collect();
    let ang_keys: Vec<f64> = means.iter().map(|m| key(m.1)).collect();
    let pos_ranks = competition_ranks(&pos_keys);
    let ang_ranks = competition_ranks(&ang_keys);
    let mean_ranks: Vec<f64> = pos_ranks
        .iter()
        .zip(&ang_ranks)
        .map(|(&p, &a)| (p + a) as f64 / 2.0)
        .collect();
    let finals = competition_ranks(&mean_ranks);
    let mut rows: Vec<RankedMethod> = tables
        .iter()
        .enumerate()
        .map(|(i, t)| RankedMethod {
            method: t.method.clone(),
            avg_pos: means[i].0,
            avg_ang: means[i].1,
            pos_rank: pos_ranks[i],
            ang_rank: ang_ranks[i],
            mean_rank: mean_ranks[i],
            final_rank: finals[i],
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.final_rank, a.pos_rank)
            .cmp(&(b.final_rank, b.pos_rank))
            .then_with(|| a.method.cmp(&b.method))
    });
    Ok(rows)
}

/// `1 + number of strictly smaller values` for every entry.
pub fn competition_ranks(values: &[f64]) -> Vec<usize> {
    values
        .iter()
        .map(|v| 1 + values.iter().filter(|w| *w < v).count())
        .collect()
}

/// Per-scene differences to a baseline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneDelta {
    pub scene: String,
    pub d_pos: f64,
    pub d_ang: f64,
}

/// Comparison of a method against a baseline over matching scenes.
///
/// Counting rule for "entries under the bar": every scene contributes one
/// position cell and one orientation cell, each under the bar when strictly
/// below the baseline; one further aggregate entry is under the bar when
/// both of the method's scene-mean errors are strictly below the baseline's.
/// Seven scenes therefore give 15 entries.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineComparison {
    pub deltas: Vec<SceneDelta>,
    pub pos_under: usize,
    pub ang_under: usize,
    pub aggregate_under: bool,
}

impl BaselineComparison {
    /// Under-bar per-scene cells, without the aggregate entry.
    pub fn cells_under(&self) -> usize {
        self.pos_under + self.ang_under
    }

    pub fn cells(&self) -> usize {
        2 * self.deltas.len()
    }

    /// Under-bar entries including the aggregate entry.
    pub fn entries_under(&self) -> usize {
        self.cells_under() + usize::from(self.aggregate_under)
    }

    pub fn entries(&self) -> usize {
        self.cells() + 1
    }
}

pub fn baseline_comparison(
    method: &MethodTable,
    baseline: &MethodTable,
) -> Result<BaselineComparison> {
    if method.scene_names() != baseline.scene_names() || baseline.scenes.is_empty() {
        return Err(Error::Eval(format!(
            "{} and {} cover different scenes",
            method.method, baseline.method
        )));
    }
    let mut out = BaselineComparison {
        deltas: Vec::new(),
        pos_under: 0,
        ang_under: 0,
        aggregate_under: false,
    };
    for (scene, bp, ba) in &baseline.scenes {
        let (mp, ma) = method.get(scene).expect("scene sets match");
        out.pos_under += usize::from(mp < *bp);
        out.ang_under += usize::from(ma < *ba);
        out.deltas.push(SceneDelta {
            scene: scene.clone(),
            d_pos: mp - bp,
            d_ang: ma - ba,
        });
    }
    let (mp, ma) = method.means();
    let (bp, ba) = baseline.means();
    out.aggregate_under = mp < bp && ma < ba;
    Ok(out)
}

/// Parses `scene,method,pos_median_m,ang_median_deg` rows into one table per
/// method, in order of first appearance.
pub fn parse_results(text: &str, origin: &Path) -> Result<Vec<MethodTable>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut grouped: Vec<(String, Vec<(String, f64, f64)>)> = Vec::new();
    for (i, row) in rd.deserialize::<SceneResult>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        match grouped.iter_mut().find(|(m, _)| *m == row.method) {
            Some((_, v)) => v.push((row.scene, row.pos, row.ang)),
            None => grouped.push((row.method, vec![(row.scene, row.pos, row.ang)])),
        }
    }
    if grouped.is_empty() {
        return Err(Error::Parse {
            path: origin.to_path_buf(),
            line: 1,
            msg: "no result rows".into(),
        });
    }
    grouped
        .into_iter()
        .map(|(m, s)| MethodTable::new(m, s))
        .collect()
}

pub fn read_results(path: &Path) -> Result<Vec<MethodTable>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text, path)
}

pub fn write_results(path: &Path, tables: &[MethodTable]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for t in tables {
        for (scene, pos, ang) in &t.scenes {
            w.serialize(SceneResult {
                scene: scene.clone(),
                method: t.method.clone(),
                pos: *pos,
                ang: *ang,
            })
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_ranking(path: &Path, rows: &[RankedMethod]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
