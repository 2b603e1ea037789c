use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::listing::{listing_hash, read_listing, write_listing, ListingRecord};
use crate::geometry::Pose;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Guesses the split from a listing file name: names containing "test"
    /// are test listings, everything else is training data.
    pub fn from_listing_name(path: &Path) -> Split {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if name.contains("test") {
            Split::Test
        } else {
            Split::Train
        }
    }
}

/// A decoded image with its ground-truth pose. `path` is relative to the
/// dataset root.
#[derive(Debug, Clone)]
pub struct Sample {
    pub path: PathBuf,
    pub pose: Pose,
    /// `[3, H, W]` with values in `[0, 1]`.
    pub image: Arc<Tensor>,
}

impl Sample {
    /// Identifier used in output file names: the relative path without its
    /// extension, with separators replaced by `_`.
    pub fn id(&self) -> String {
        self.path
            .with_extension("")
            .to_string_lossy()
            .replace(['/', '\\'], "_")
    }
}

/// Images with canonicalized ground-truth poses from one scene.
#[derive(Debug, Clone)]
pub struct PoseDataset {
    pub root: PathBuf,
    pub scene: String,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl PoseDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn records(&self) -> Vec<ListingRecord> {
        self.samples
            .iter()
            .map(|s| ListingRecord {
                image: s.path.clone(),
                pose: s.pose,
            })
            .collect()
    }

    /// Hash of the dataset listing, recorded in run manifests.
    pub fn content_hash(&self) -> String {
        listing_hash(&self.records())
    }

    /// Writes every image as an 8-bit PNG under `dir` and the listing to
    /// `dir/listing_name`.
    pub fn save(&self, dir: &Path, listing_name: &str) -> Result<()> {
        for s in &self.samples {
            let path = dir.join(&s.path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            save_rgb(&s.image, &path)?;
        }
        write_listing(&dir.join(listing_name), &self.records())
    }
}

/// Loads a listing and eagerly decodes every image it names. Image paths
/// are resolved against `root`; the scene name is the root's final
/// component.
pub fn load_dataset(root: &Path, listing: &Path) -> Result<PoseDataset> {
    let records = read_listing(listing)?;
    if records.is_empty() {
        return Err(Error::Parse {
            path: listing.to_path_buf(),
            line: 0,
            msg: "listing contains no records".into(),
        });
    }
    let samples = records
        .into_iter()
        .map(|r| {
            let image = load_rgb(&root.join(&r.image))?;
            Ok(Sample {
                path: r.image,
                pose: r.pose,
                image: Arc::new(image),
            })
        })
        .collect::<Result<_>>()?;
    let scene = root
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "scene".into());
    Ok(PoseDataset {
        root: root.to_path_buf(),
        scene,
        split: Split::from_listing_name(listing),
        samples,
    })
}

/// Decodes an 8-bit raster into a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "image not found"),
        ));
    }
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_rgb(t: &Tensor, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Contract(format!(
            "expected a [3, H, W] image, got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = t.data()[(c * h + y as usize) * w + x as usize];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
