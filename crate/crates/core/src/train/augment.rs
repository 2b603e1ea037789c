use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// Resize, crop and colour-jitter settings. Defaults resize the smaller
/// edge to 256 and crop 224; jitter factors are drawn from `[0.9, 1.1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub resize: usize,
    pub crop: usize,
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    pub saturation: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            resize: 256,
            crop: 224,
            brightness: [0.9, 1.1],
            contrast: [0.9, 1.1],
            saturation: [0.9, 1.1],
        }
    }
}

impl AugmentConfig {
    /// Resize and crop both to `size`, keeping the default jitter.
    pub fn sized(size: usize) -> Self {
        AugmentConfig {
            resize: size,
            crop: size,
            ..Self::default()
        }
    }

    /// No jitter: every factor range is `[1, 1]`.
    pub fn without_jitter(self) -> Self {
        AugmentConfig {
            brightness: [1.0, 1.0],
            contrast: [1.0, 1.0],
            saturation: [1.0, 1.0],
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.resize < self.crop {
            return Err(Error::Config(format!(
                "crop {} must be positive and no larger than resize {}",
                self.crop, self.resize
            )));
        }
        for r in [self.brightness, self.contrast, self.saturation] {
            if !(r[0] >= 0.0 && r[0] <= r[1]) {
                return Err(Error::Config(format!("invalid jitter range {r:?}")));
            }
        }
        Ok(())
    }
}

/// Training path: resize, random crop, jitter. Test path: resize, centre
/// crop. Output is `[3, crop, crop]` clamped to `[0, 1]`.
pub fn augment(
    image: &Tensor,
    config: &AugmentConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    config.validate()?;
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::Contract(format!(
            "expected a non-empty [3, H, W] image, got {s:?}"
        )));
    }
    let resized = resize_smaller_edge(image, config.resize)?;
    let (h, w) = (resized.shape()[1], resized.shape()[2]);
    let c = config.crop;
    if h < c || w < c {
        return Err(Error::Contract(format!(
            "resized image {h}x{w} is smaller than the {c}x{c} crop"
        )));
    }
    let (top, left) = match mode {
        Mode::Train => (rng.gen_range(0..=h - c), rng.gen_range(0..=w - c)),
        Mode::Test => ((h - c) / 2, (w - c) / 2),
    };
    let mut out = crop(&resized, top, left, c, c);
    if mode == Mode::Train {
        let mut draw = |r: [f64; 2]| {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.gen_range(r[0]..r[1])
            }
        };
        let b = draw(config.brightness);
        let ct = draw(config.contrast);
        let sat = draw(config.saturation);
        jitter(&mut out, b, ct, sat);
    }
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Bilinear resize so the smaller edge equals `target`, preserving aspect
/// ratio (the other edge is rounded). Sample positions use pixel centres.
pub fn resize_smaller_edge(image: &Tensor, target: usize) -> Result<Tensor> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if target == 0 || h == 0 || w == 0 {
        return Err(Error::Contract("cannot resize a degenerate image".into()));
    }
    let (nh, nw) = if h <= w {
        (
            target,
            ((w as f64 * target as f64 / h as f64).round() as usize).max(1),
        )
    } else {
        (
            ((h as f64 * target as f64 / w as f64).round() as usize).max(1),
            target,
        )
    };
    Ok(resize_bilinear(image, nh, nw))
}

/// Bilinear resampling of every channel of a `[C, H, W]` tensor to
/// `[C, out_h, out_w]`, half-pixel aligned with edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).expect("resize shape")
}

fn crop(image: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    let s = image.shape();
    let (c, ih, iw) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in top..top + h {
            let row = (ch * ih + y) * iw;
            out.extend_from_slice(&image.data()[row + left..row + left + w]);
        }
    }
    Tensor::new(vec![c, h, w], out).expect("crop shape")
}

/// Applies brightness, contrast and saturation factors in that order; a
/// factor of exactly 1 leaves the image untouched.
fn jitter(image: &mut Tensor, brightness: f64, contrast: f64, saturation: f64) {
    let plane = image.shape()[1] * image.shape()[2];
    let d = image.data_mut();
    let clamp = |d: &mut [f64]| d.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let gray = |d: &[f64], i: usize| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i];
    if brightness != 1.0 {
        d.iter_mut().for_each(|v| *v *= brightness);
        clamp(d);
    }
    if contrast != 1.0 {
        let mean = (0..plane).map(|i| gray(d, i)).sum::<f64>() / plane as f64;
        d.iter_mut()
            .for_each(|v| *v = (*v - mean) * contrast + mean);
        clamp(d);
    }
    if saturation != 1.0 {
        for i in 0..plane {
            let g = gray(d, i);
            for ch in 0..3 {
                let v = &mut d[ch * plane + i];
                *v = (*v - g) * saturation + g;
            }
        }
        clamp(d);
    }
}
