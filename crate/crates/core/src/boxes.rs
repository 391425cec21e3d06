//! Box algebra in continuous pixel coordinates (origin top-left, area `w·h`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in center form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite box ({cx}, {cy}, {w}, {h})")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!("degenerate box extent {w}×{h}")));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// COCO `[x_topleft, y_topleft, w, h]`.
    pub fn from_coco(b: [f64; 4]) -> Result<Self> {
        Self::new(b[0] + b[2] / 2.0, b[1] + b[3] / 2.0, b[2], b[3])
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }

    pub fn to_coco(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection with `[0, width] × [0, height]`; `None` if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        let [x1, y1, x2, y2] = self.corners();
        Self::from_corners(x1.clamp(0.0, width), y1.clamp(0.0, height), x2.clamp(0.0, width), y2.clamp(0.0, height)).ok()
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let [ax1, ay1, ax2, ay2] = self.corners();
        let [bx1, by1, bx2, by2] = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        iw * ih
    }
}

/// Intersection area over union area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Regression offsets relative to an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta { tx: 0.0, ty: 0.0, tw: 0.0, th: 0.0 };

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { tx: v[0], ty: v[1], tw: v[2], th: v[3] }
    }
}

/// Largest accepted `|tw|`, `|th|`: `ln(1000)`.
pub fn max_log_scale() -> f64 {
    1000f64.ln()
}

/// `tx = (x − x_a)/w_a`, `ty = (y − y_a)/h_a`, `tw = ln(w/w_a)`, `th = ln(h/h_a)`.
pub fn encode(anchor: &BBox, target: &BBox) -> BoxDelta {
    BoxDelta {
        tx: (target.cx - anchor.cx) / anchor.w,
        ty: (target.cy - anchor.cy) / anchor.h,
        tw: (target.w / anchor.w).ln(),
        th: (target.h / anchor.h).ln(),
    }
}

/// Inverse of [`encode`]. Rejects log-scale offsets beyond `ln(1000)`.
pub fn decode(anchor: &BBox, d: &BoxDelta) -> Result<BBox> {
    let cap = max_log_scale();
    if !(d.tw.abs() <= cap && d.th.abs() <= cap) {
        return Err(Error::InvalidBox(format!("log-scale offset ({}, {}) beyond ±ln(1000)", d.tw, d.th)));
    }
    BBox::new(d.tx * anchor.w + anchor.cx, d.ty * anchor.h + anchor.cy, anchor.w * d.tw.exp(), anchor.h * d.th.exp())
}

/// [`decode`] with the log-scale offsets clamped instead of rejected, then
/// optionally clipped to the image. Used on raw network outputs.
pub fn decode_clamped(anchor: &BBox, d: &BoxDelta, clip_to: Option<(f64, f64)>) -> Option<BBox> {
    let cap = max_log_scale();
    let d = BoxDelta { tw: d.tw.clamp(-cap, cap), th: d.th.clamp(-cap, cap), ..*d };
    let b = decode(anchor, &d).ok()?;
    match clip_to {
        Some((w, h)) => b.clip(w, h),
        None => Some(b),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub bbox: BBox,
    pub level: usize,
    pub index: usize,
}

/// Anchor ratios (`h/w`) and one scale per pyramid level starting at P2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub ratios: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { ratios: vec![0.5, 1.0, 2.0], scales: vec![32.0, 64.0, 128.0, 256.0, 512.0] }
    }
}

impl AnchorConfig {
    pub const EXTENDED_RATIOS: [f64; 5] = [1.0 / 3.0, 0.5, 1.0, 2.0, 3.0];

    pub fn extended(mut self) -> Self {
        self.ratios = Self::EXTENDED_RATIOS.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config(format!("anchor ratios {:?} must be positive", self.ratios)));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("anchor scales {:?} must be positive", self.scales)));
        }
        Ok(())
    }

    pub fn per_location(&self) -> usize {
        self.ratios.len()
    }

    pub fn scale_for_level(&self, level: usize) -> Option<f64> {
        level.checked_sub(2).and_then(|i| self.scales.get(i)).copied()
    }
}

/// Feature-map extent and stride of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

/// Tiles `|ratios|` anchors at every cell of every level, ordered level,
/// row, column, ratio. Width `s/√ρ` and height `s·√ρ` keep the area at `s²`.
pub fn generate_anchors(levels: &[LevelShape], cfg: &AnchorConfig) -> Result<Vec<Anchor>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for ls in levels {
        let s = cfg
            .scale_for_level(ls.level)
            .ok_or_else(|| Error::Config(format!("no anchor scale for level {}", ls.level)))?;
        let shapes: Vec<(f64, f64)> = cfg.ratios.iter().map(|&r| (s / r.sqrt(), s * r.sqrt())).collect();
        for y in 0..ls.height {
            for x in 0..ls.width {
                let cx = (x as f64 + 0.5) * ls.stride as f64;
                let cy = (y as f64 + 0.5) * ls.stride as f64;
                for &(w, h) in &shapes {
                    let index = out.len();
                    out.push(Anchor { bbox: BBox::new(cx, cy, w, h)?, level: ls.level, index });
                }
            }
        }
    }
    Ok(out)
}

/// Greedy NMS. Drops scores below `score_threshold`, visits the rest by
/// descending score (ties: lower index first) and suppresses every box whose
/// IoU with a kept box exceeds `iou_threshold`. Returns kept indices in visit order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64, score_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::Shape(format!("{} boxes vs {} scores", boxes.len(), scores.len())));
    }
    let mut order: Vec<usize> = (0..boxes.len()).filter(|&i| scores[i] >= score_threshold).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}
