//! Pose listing files: one `<image> <tx> <ty> <tz> <qw> <qx> <qy> <qz>`
//! record per line, `#` comments and blank lines ignored.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::geometry::{quat_norm, Pose, MIN_QUAT_NORM};
use crate::{Error, Result};

/// One listing line: an image path relative to the dataset root and its
/// canonicalized ground-truth pose.
#[derive(Debug, Clone, PartialEq)]
pub struct ListingRecord {
    pub image: PathBuf,
    pub pose: Pose,
}

/// Parses listing text. `origin` is only used in error messages.
pub fn parse_listing(text: &str, origin: &Path) -> Result<Vec<ListingRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", fields.len())));
        }
        let mut v = [0.0; 7];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("invalid number {f:?}")))?;
        }
        let q = [v[3], v[4], v[5], v[6]];
        if quat_norm(&q) < MIN_QUAT_NORM {
            return Err(err("zero quaternion".into()));
        }
        let pose = Pose::new([v[0], v[1], v[2]], q)
            .canonicalized()
            .map_err(|e| err(e.to_string()))?;
        out.push(ListingRecord {
            image: PathBuf::from(fields[0]),
            pose,
        });
    }
    Ok(out)
}

/// Formats records as listing text. Floats use the shortest representation
/// that parses back to the same value, so write/parse round-trips exactly.
pub fn format_listing(records: &[ListingRecord]) -> String {
    let mut s = String::from("# image tx ty tz qw qx qy qz\n");
    for r in records {
        let [x, y, z] = r.pose.x;
        let [qw, qx, qy, qz] = r.pose.q;
        let _ = writeln!(
            s,
            "{} {x:?} {y:?} {z:?} {qw:?} {qx:?} {qy:?} {qz:?}",
            r.image.display()
        );
    }
    s
}

pub fn read_listing(path: &Path) -> Result<Vec<ListingRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_listing(&text, path)
}

pub fn write_listing(path: &Path, records: &[ListingRecord]) -> Result<()> {
    std::fs::write(path, format_listing(records)).map_err(|e| Error::io(path, e))
}

/// Content hash of a listing in git blob style: SHA-256 over
/// `"blob <len>\0"` followed by the canonical listing text, hex encoded.
pub fn listing_hash(records: &[ListingRecord]) -> String {
    let text = format_listing(records);
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
