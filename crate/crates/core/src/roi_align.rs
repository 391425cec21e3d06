//! Quantisation-free ROI feature extraction.
//!
//! A ROI is mapped into feature coordinates by dividing by the level stride
//! (no rounding), split into `p×p` bins, and each bin is sampled at its four
//! quarter points. Feature cell `(i, j)` sits at `(j + 0.5, i + 0.5)`;
//! samples are bilinear in the cell values, clamped to the outermost cell
//! centres inside the map, and read 0 outside `[0, W] × [0, H]`. A bin is
//! the max (or mean) of its four samples.

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::graph::{Graph, PoolMode, Taps, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub bbox: BBox,
    pub image_id: u64,
    pub level: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiAlignConfig {
    pub output: usize,
    pub aggregation: PoolMode,
}

/// Bin-relative sample positions along each axis.
pub const SAMPLE_OFFSETS: [f64; 2] = [0.25, 0.75];

impl RoiAlignConfig {
    pub fn boxes() -> Self {
        Self { output: 7, aggregation: PoolMode::Max }
    }

    pub fn masks() -> Self {
        Self { output: 14, aggregation: PoolMode::Max }
    }
}

/// Canonical ROI side and level for [`assign_level`].
pub const CANONICAL_SIZE: f64 = 224.0;
pub const CANONICAL_LEVEL: usize = 4;

/// `clamp(floor(k0 + log2(√(w·h) / 224)), 2, 5)`.
pub fn assign_level(roi: &BBox) -> usize {
    assign_level_with(roi, CANONICAL_LEVEL, CANONICAL_SIZE, 2, 5)
}

pub fn assign_level_with(roi: &BBox, k0: usize, canonical: f64, min: usize, max: usize) -> usize {
    let lvl = (k0 as f64 + (roi.area().sqrt() / canonical).log2()).floor();
    (lvl.max(min as f64).min(max as f64)) as usize
}

/// Bilinear taps into one `H×W` plane at feature point `(x, y)`.
pub fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> Vec<(usize, f64)> {
    if x < 0.0 || y < 0.0 || x > w as f64 || y > h as f64 {
        return Vec::new();
    }
    let u = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let v = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (lx, ly) = (u - x0 as f64, v - y0 as f64);
    let mut taps = Vec::with_capacity(4);
    for (yy, wy) in [(y0, 1.0 - ly), (y1, ly)] {
        for (xx, wx) in [(x0, 1.0 - lx), (x1, lx)] {
            let wgt = wy * wx;
            if wgt != 0.0 {
                match taps.iter_mut().find(|(i, _)| *i == yy * w + xx) {
                    Some((_, acc)) => *acc += wgt,
                    None => taps.push((yy * w + xx, wgt)),
                }
            }
        }
    }
    taps
}

/// Forward values and the sparse read pattern that produced them.
pub fn roi_align_taps(feature: &Tensor, stride: f64, roi: &BBox, cfg: &RoiAlignConfig) -> Result<(Tensor, Taps)> {
    let (c, h, w) = feature.chw()?;
    let p = cfg.output;
    if p == 0 {
        return Err(Error::Config("ROI Align output resolution must be ≥ 1".into()));
    }
    if !(roi.area() > 0.0) {
        return Err(Error::InvalidBox("zero-area ROI".into()));
    }
    let [x1, y1, x2, y2] = roi.corners();
    let (fx1, fy1) = (x1 / stride, y1 / stride);
    let (bw, bh) = ((x2 - x1) / stride / p as f64, (y2 - y1) / stride / p as f64);
    let hw = h * w;
    let mut values = Vec::with_capacity(c * p * p);
    let mut taps: Taps = Vec::with_capacity(c * p * p);
    // sample taps per bin, shared by all channels
    let mut bin_samples: Vec<Vec<Vec<(usize, f64)>>> = Vec::with_capacity(p * p);
    for by in 0..p {
        for bx in 0..p {
            let mut samples = Vec::with_capacity(4);
            for oy in SAMPLE_OFFSETS {
                for ox in SAMPLE_OFFSETS {
                    let sx = fx1 + (bx as f64 + ox) * bw;
                    let sy = fy1 + (by as f64 + oy) * bh;
                    samples.push(bilinear_taps(sx, sy, h, w));
                }
            }
            bin_samples.push(samples);
        }
    }
    let data = feature.data();
    for ch in 0..c {
        let base = ch * hw;
        for samples in &bin_samples {
            let eval = |s: &[(usize, f64)]| s.iter().map(|&(i, wt)| wt * data[base + i]).sum::<f64>();
            match cfg.aggregation {
                PoolMode::Max => {
                    let mut best = 0;
                    let mut best_v = f64::NEG_INFINITY;
                    for (k, s) in samples.iter().enumerate() {
                        let v = eval(s);
                        if v > best_v {
                            best_v = v;
                            best = k;
                        }
                    }
                    values.push(best_v);
                    taps.push(samples[best].iter().map(|&(i, wt)| (base + i, wt)).collect());
                }
                PoolMode::Avg => {
                    let n = samples.len() as f64;
                    values.push(samples.iter().map(|s| eval(s)).sum::<f64>() / n);
                    taps.push(samples.iter().flatten().map(|&(i, wt)| (base + i, wt / n)).collect());
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, p, p], values), taps))
}

/// `C×H×W` feature map at `stride` → `C×p×p` ROI features, differentiable in the map.
pub fn roi_align(g: &mut Graph, feature: Var, stride: f64, roi: &BBox, cfg: &RoiAlignConfig) -> Result<Var> {
    let (_, taps) = roi_align_taps(g.value(feature), stride, roi, cfg)?;
    let c = g.shape(feature)[0];
    g.sparse(feature, &[c, cfg.output, cfg.output], taps)
}
