//! Independent reference implementations and random instance generators
//! shared by the oracle tests and the acceptance report.
#![allow(dead_code)]

use attnmask::boxes::BBox;
use attnmask::metrics::{Detection, GtRecord};
use attnmask::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// IoU from raw corners.
pub fn ref_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |c: [f64; 4]| (c[2] - c[0]) * (c[3] - c[1]);
    inter / (area(a) + area(b) - inter)
}

/// Greedy NMS by repeated arg-max over the survivors.
pub fn ref_nms(boxes: &[[f64; 4]], scores: &[f64], iou_thr: f64, score_thr: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = scores.iter().map(|&s| s >= score_thr).collect();
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        alive[b] = false;
        for j in 0..boxes.len() {
            if alive[j] && ref_iou(boxes[b], boxes[j]) > iou_thr {
                alive[j] = false;
            }
        }
    }
    keep
}

/// Random NMS instance with quantised scores and duplicated boxes so ties occur.
pub fn nms_instance(rng: &mut ChaCha8Rng) -> (Vec<[f64; 4]>, Vec<f64>, f64, f64) {
    let n = rng.gen_range(0..=200);
    let mut boxes: Vec<[f64; 4]> = Vec::with_capacity(n);
    for _ in 0..n {
        if !boxes.is_empty() && rng.gen_bool(0.1) {
            let k = rng.gen_range(0..boxes.len());
            boxes.push(boxes[k]);
            continue;
        }
        let x = rng.gen_range(0.0..100.0);
        let y = rng.gen_range(0.0..100.0);
        boxes.push([x, y, x + rng.gen_range(1.0..40.0), y + rng.gen_range(1.0..40.0)]);
    }
    let scores = (0..n).map(|_| rng.gen_range(0..20) as f64 / 20.0).collect();
    let iou_thr = [0.3, 0.5, 0.7][rng.gen_range(0..3)];
    let score_thr = [0.0, 0.25, 0.5][rng.gen_range(0..3)];
    (boxes, scores, iou_thr, score_thr)
}

pub fn to_bbox(c: [f64; 4]) -> BBox {
    BBox::from_corners(c[0], c[1], c[2], c[3]).unwrap()
}

/// Sub-cells per feature cell in the rasterised oracle.
pub const RASTER: usize = 64;

/// The interpolated field of one plane rasterised on a `1/RASTER` grid over
/// `[0, W] × [0, H]`. Each node is a sum of tent weights over every cell,
/// with the sample point clamped to the outermost cell centres.
pub struct Raster {
    values: Vec<f64>,
    nx: usize,
    ny: usize,
    w: usize,
    h: usize,
}

impl Raster {
    pub fn new(plane: &[f64], h: usize, w: usize) -> Self {
        let (nx, ny) = (w * RASTER + 1, h * RASTER + 1);
        let tent = |d: f64| (1.0 - d.abs()).max(0.0);
        let mut values = vec![0.0; nx * ny];
        for gy in 0..ny {
            let v = (gy as f64 / RASTER as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            for gx in 0..nx {
                let u = (gx as f64 / RASTER as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let mut acc = 0.0;
                for i in 0..h {
                    let wy = tent(v - i as f64);
                    if wy == 0.0 {
                        continue;
                    }
                    for j in 0..w {
                        acc += wy * tent(u - j as f64) * plane[i * w + j];
                    }
                }
                values[gy * nx + gx] = acc;
            }
        }
        Self { values, nx, ny, w, h }
    }

    /// Field value at `(x, y)`; zero outside the map. The field is bilinear
    /// within each raster cell, so interpolating the raster is exact.
    pub fn at(&self, x: f64, y: f64) -> f64 {
        if x < 0.0 || y < 0.0 || x > self.w as f64 || y > self.h as f64 {
            return 0.0;
        }
        let (gx, gy) = (x * RASTER as f64, y * RASTER as f64);
        let x0 = (gx.floor() as usize).min(self.nx - 2);
        let y0 = (gy.floor() as usize).min(self.ny - 2);
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let v = |xx: usize, yy: usize| self.values[yy * self.nx + xx];
        (1.0 - fy) * ((1.0 - fx) * v(x0, y0) + fx * v(x0 + 1, y0)) + fy * ((1.0 - fx) * v(x0, y0 + 1) + fx * v(x0 + 1, y0 + 1))
    }
}

/// ROI features from the raster: per bin the max (or mean) over the four
/// quarter points.
pub fn ref_roi_align(feature: &Tensor, stride: f64, roi: [f64; 4], p: usize, max: bool) -> Vec<f64> {
    let (c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let mut out = Vec::with_capacity(c * p * p);
    for ch in 0..c {
        let raster = Raster::new(&feature.data()[ch * h * w..(ch + 1) * h * w], h, w);
        let (x1, y1) = (roi[0] / stride, roi[1] / stride);
        let (bw, bh) = ((roi[2] - roi[0]) / stride / p as f64, (roi[3] - roi[1]) / stride / p as f64);
        for by in 0..p {
            for bx in 0..p {
                let mut s = Vec::new();
                for oy in [0.25, 0.75] {
                    for ox in [0.25, 0.75] {
                        s.push(raster.at(x1 + (bx as f64 + ox) * bw, y1 + (by as f64 + oy) * bh));
                    }
                }
                out.push(if max { s.iter().copied().fold(f64::NEG_INFINITY, f64::max) } else { s.iter().sum::<f64>() / 4.0 });
            }
        }
    }
    out
}

/// Random feature map, stride and ROI (possibly hanging off the map).
pub fn roi_instance(rng: &mut ChaCha8Rng) -> (Tensor, f64, [f64; 4], usize) {
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(1..=9);
    let w = rng.gen_range(1..=9);
    let feature = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-2.0..2.0));
    let stride = [1.0, 2.0, 4.0, 8.0][rng.gen_range(0..4)];
    let (fw, fh) = (w as f64 * stride, h as f64 * stride);
    let x1 = rng.gen_range(-0.3 * fw..fw);
    let y1 = rng.gen_range(-0.3 * fh..fh);
    let roi = [x1, y1, x1 + rng.gen_range(0.2..1.2) * fw, y1 + rng.gen_range(0.2..1.2) * fh];
    let p = rng.gen_range(1..=7);
    (feature, stride, roi, p)
}

/// A small evaluation instance: ≤ 5 images, ≤ 3 classes, ≤ 10 boxes per side.
pub fn eval_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GtRecord>) {
    let images = rng.gen_range(1..=5u64);
    let classes = rng.gen_range(1..=3u64);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x = rng.gen_range(0.0..40.0);
        let y = rng.gen_range(0.0..40.0);
        [x, y, x + rng.gen_range(4.0..20.0), y + rng.gen_range(4.0..20.0)]
    };
    let mut gts = Vec::new();
    for _ in 0..rng.gen_range(1..=10) {
        let b = rand_box(rng);
        gts.push(GtRecord {
            image_id: rng.gen_range(0..images),
            category_id: rng.gen_range(1..=classes),
            bbox: to_bbox(b),
            iscrowd: rng.gen_bool(0.1),
        });
    }
    if gts.iter().all(|g| g.iscrowd) {
        gts[0].iscrowd = false;
    }
    let mut dets = Vec::new();
    for _ in 0..rng.gen_range(0..=10) {
        let (image_id, category_id, b) = if !gts.is_empty() && rng.gen_bool(0.6) {
            // jitter a ground-truth box so matches happen at a range of IoUs
            let g = gts[rng.gen_range(0..gts.len())];
            let [x1, y1, x2, y2] = g.bbox.corners();
            let j = |rng: &mut ChaCha8Rng| rng.gen_range(-3.0..3.0);
            let (a, b2) = (x1 + j(rng), y1 + j(rng));
            (g.image_id, g.category_id, [a, b2, (x2 + j(rng)).max(a + 1.0), (y2 + j(rng)).max(b2 + 1.0)])
        } else {
            (rng.gen_range(0..images), rng.gen_range(1..=classes), rand_box(rng))
        };
        let score = rng.gen_range(0..10) as f64 / 10.0 + 0.05;
        dets.push(Detection { image_id, category_id, bbox: to_bbox(b), score });
    }
    (dets, gts)
}

/// Exhaustive greedy-matching evaluator. Detections are visited by score
/// (ties to the earlier one); each visit scans every ground truth for the
/// unmatched regular box of the same image and class with the highest IoU.
/// AP is the mean over recall r = 0, 0.01, …, 1 of the highest precision
/// reached at any recall ≥ r.
pub fn ref_map(dets: &[Detection], gts: &[GtRecord], thr: f64) -> f64 {
    let mut classes: Vec<u64> = gts.iter().filter(|g| !g.iscrowd).map(|g| g.category_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for &cat in &classes {
        let n_gt = gts.iter().filter(|g| !g.iscrowd && g.category_id == cat).count();
        let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].category_id == cat).collect();
        order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
        let mut used = vec![false; gts.len()];
        let mut flags = Vec::new();
        for &i in &order {
            let d = &dets[i];
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.iscrowd || g.category_id != cat || g.image_id != d.image_id {
                    continue;
                }
                let v = ref_iou(d.bbox.corners(), g.bbox.corners());
                if v >= thr && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, j));
                }
            }
            if let Some((_, j)) = best {
                used[j] = true;
                flags.push(true);
            } else if !gts.iter().any(|g| {
                g.iscrowd && g.category_id == cat && g.image_id == d.image_id && ref_iou(d.bbox.corners(), g.bbox.corners()) >= thr
            }) {
                flags.push(false);
            }
        }
        let mut points = Vec::new();
        let mut tp = 0;
        for (k, &f) in flags.iter().enumerate() {
            tp += f as usize;
            points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
        }
        let mut ap = 0.0;
        for r in 0..=100 {
            let r = r as f64 / 100.0;
            ap += points.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max);
        }
        total += ap / 101.0;
    }
    total / classes.len() as f64
}
