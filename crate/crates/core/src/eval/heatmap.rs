use std::path::{Path, PathBuf};

use crate::tensor::Tensor;
use crate::train::resize_bilinear;
use crate::{Error, Result};

/// Which encoder a heatmap was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Position,
    Orientation,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Position => "position",
            BranchKind::Orientation => "orientation",
        }
    }
}

/// A token attention map and its display-ready upsampling.
#[derive(Debug, Clone)]
pub struct HeatmapArtifact {
    pub branch: BranchKind,
    /// `[H_m, W_m]`, sums to one.
    pub raw: Tensor,
    /// `[H, W]` in `[0, 1]` with maximum 1, or flat 0.5 when degenerate.
    pub upsampled: Tensor,
    /// All raw weights were equal, so there was nothing to normalize.
    pub degenerate: bool,
}

/// Bilinearly upsamples an attention map to `target = (H, W)` and min-max
/// normalizes it.
pub fn export_heatmap(
    heat: &Tensor,
    target: (usize, usize),
    branch: BranchKind,
) -> Result<HeatmapArtifact> {
    let s = heat.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 || target.0 == 0 || target.1 == 0 {
        return Err(Error::Contract(format!(
            "heatmap must be a non-empty [H, W] map with a non-empty target, got {s:?} -> {target:?}"
        )));
    }
    if heat.data().iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Contract(
            "attention weights must be nonnegative".into(),
        ));
    }
    let total: f64 = heat.data().iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "attention weights sum to {total}, expected 1"
        )));
    }
    let planar = heat.reshape([1, s[0], s[1]])?;
    let up = resize_bilinear(&planar, target.0, target.1);
    let (lo, hi) = up
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let degenerate = !(hi - lo > 1e-15);
    let data: Vec<f64> = if degenerate {
        log::warn!(
            "{} heatmap is flat; writing a uniform 0.5 image",
            branch.name()
        );
        vec![0.5; target.0 * target.1]
    } else {
        up.data().iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    Ok(HeatmapArtifact {
        branch,
        raw: heat.clone(),
        upsampled: Tensor::new(vec![target.0, target.1], data)?,
        degenerate,
    })
}

/// Writes `{image_id}.{branch}.png` (8-bit greyscale of the upsampled map)
/// and `{image_id}.{branch}.csv` (raw weights, one map row per line).
pub fn write_heatmap(
    art: &HeatmapArtifact,
    dir: &Path,
    image_id: &str,
) -> Result<(PathBuf, PathBuf)> {
    let stem = format!("{image_id}.{}", art.branch.name());
    let png = dir.join(format!("{stem}.png"));
    let csv_path = dir.join(format!("{stem}.csv"));
    let (h, w) = (art.upsampled.shape()[0], art.upsampled.shape()[1]);
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = art.upsampled.data()[y as usize * w + x as usize];
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(&png).map_err(|e| Error::Image {
        path: png.clone(),
        msg: e.to_string(),
    })?;
    let cols = art.raw.shape()[1];
    let text: String = art
        .raw
        .data()
        .chunks(cols)
        .map(|row| {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            cells.join(",") + "\n"
        })
        .collect();
    std::fs::write(&csv_path, text).map_err(|e| Error::io(&csv_path, e))?;
    Ok((png, csv_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_is_degenerate() {
        let a = export_heatmap(&Tensor::full([2, 2], 0.25), (8, 8), BranchKind::Position).unwrap();
        assert!(a.degenerate);
        assert!(a.upsampled.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hot_cell_peaks_at_its_centre() {
        let mut heat = Tensor::zeros([4, 4]);
        heat.data_mut()[4 + 2] = 1.0; // cell (1, 2)
        let a = export_heatmap(&heat, (32, 32), BranchKind::Orientation).unwrap();
        assert_eq!(a.upsampled.shape(), &[32, 32]);
        let (mut best, mut at) = (f64::MIN, 0);
        for (i, &v) in a.upsampled.data().iter().enumerate() {
            if v > best {
                best = v;
                at = i;
            }
        }
        assert_eq!(best, 1.0);
        let (y, x) = (at / 32, at % 32);
        // centre of cell (1, 2) spans output pixels 11–12 and 19–20
        assert!((11..=12).contains(&y) && (19..=20).contains(&x), "{y} {x}");
    }

    #[test]
    fn rejects_negative_and_unnormalized() {
        let bad = Tensor::new(vec![1, 2], vec![1.5, -0.5]).unwrap();
        assert!(export_heatmap(&bad, (4, 4), BranchKind::Position).is_err());
        let bad = Tensor::new(vec![1, 2], vec![0.5, 0.6]).unwrap();
        assert!(export_heatmap(&bad, (4, 4), BranchKind::Position).is_err());
    }
}
