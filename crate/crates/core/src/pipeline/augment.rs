//! Geometric augmentation applied consistently to image, masks and boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::synth::{mask_bbox, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augment {
    HFlip,
    /// Quarter turn counter-clockwise.
    Rot90,
    /// Keep the window with top-left `(x, y)` and extent `w×h`.
    Crop { x: usize, y: usize, w: usize, h: usize },
}

/// Fraction of an instance's area a crop must keep for the instance to survive.
pub const CROP_MIN_AREA: f64 = 0.25;

/// Rebuilds a sample from a pixel map `dst (i, j) ← src index`.
fn remap(s: &Sample, h: usize, w: usize, src: impl Fn(usize, usize) -> usize, min_keep: f64) -> Result<Sample> {
    let (sh, sw) = (s.height(), s.width());
    let plane = sh * sw;
    let index: Vec<usize> = (0..h * w).map(|k| src(k / w, k % w)).collect();
    let mut image = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        image.extend(index.iter().map(|&i| s.image.data()[c * plane + i]));
    }
    let mut out = Sample { image: Tensor::new(&[3, h, w], image)?, boxes: vec![], classes: vec![], masks: vec![] };
    for (m, &c) in s.masks.iter().zip(&s.classes) {
        let before = m.iter().filter(|&&b| b).count();
        let mask: Vec<bool> = index.iter().map(|&i| m[i]).collect();
        let after = mask.iter().filter(|&&b| b).count();
        if after == 0 || (after as f64) < min_keep * before as f64 {
            continue;
        }
        out.boxes.push(mask_bbox(&mask, h, w).expect("non-empty"));
        out.classes.push(c);
        out.masks.push(mask);
    }
    Ok(out)
}

pub fn augment(s: &Sample, op: Augment) -> Result<Sample> {
    let (h, w) = (s.height(), s.width());
    match op {
        Augment::HFlip => remap(s, h, w, |i, j| i * w + (w - 1 - j), 0.0),
        Augment::Rot90 => remap(s, w, h, |i, j| j * w + (w - 1 - i), 0.0),
        Augment::Crop { x, y, w: cw, h: ch } => {
            if cw == 0 || ch == 0 || x + cw > w || y + ch > h {
                return Err(Error::Config(format!("crop {cw}×{ch} at ({x}, {y}) outside {w}×{h} canvas")));
            }
            remap(s, ch, cw, |i, j| (y + i) * w + (x + j), CROP_MIN_AREA)
        }
    }
}
