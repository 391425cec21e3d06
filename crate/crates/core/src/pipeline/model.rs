//! Detector assembly: backbone and FPN, region proposal head, box head and
//! mask head, plus the training losses that tie them together.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{fpn_fuse, BackboneParams, ConvParams, FpnParams, PyramidFeatures};
use crate::boxes::{decode_clamped, encode, generate_anchors, iou, nms, Anchor, BBox, BoxDelta, LevelShape};
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::losses::assign_anchor_labels;
use crate::params::{add_linear, Bound, ParamId, ParamStore, LINEAR_GAIN, RELU_GAIN};
use crate::roi_align::{assign_level_with, roi_align, CANONICAL_LEVEL};
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::synth::Sample;

/// Gain for the final classification / regression layers.
const PREDICTOR_GAIN: f64 = 0.1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RpnParams {
    pub conv: ConvParams,
    pub objectness: ConvParams,
    pub deltas: ConvParams,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    fn init(store: &mut ParamStore, name: &str, fin: usize, fout: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let (weight, bias) = add_linear(store, name, fin, fout, gain, rng);
        Self { weight, bias }
    }

    fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        g.linear(x, b[self.weight], Some(b[self.bias]))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoxHeadParams {
    pub fc1: Dense,
    pub fc2: Dense,
    pub cls: Dense,
    pub reg: Dense,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskHeadParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub predictor: ConvParams,
}

/// Parameters plus the layer layout that indexes them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: BackboneParams,
    pub fpn: FpnParams,
    pub rpn: RpnParams,
    pub box_head: BoxHeadParams,
    pub mask_head: MaskHeadParams,
}

/// Deterministic initialisation from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let backbone = BackboneParams::init(&mut store, &cfg.stages, &cfg.attention_config(), &mut rng)?;
    let d = cfg.fpn_dim;
    let fpn = FpnParams::init(&mut store, &cfg.stages.widths, d, &mut rng);
    let a = cfg.anchors.per_location();
    let rpn = RpnParams {
        conv: ConvParams::init(&mut store, "rpn.conv", d, d, 3, 1, RELU_GAIN, &mut rng),
        objectness: ConvParams::init(&mut store, "rpn.objectness", d, a, 1, 1, PREDICTOR_GAIN, &mut rng),
        deltas: ConvParams::init(&mut store, "rpn.deltas", d, 4 * a, 1, 1, PREDICTOR_GAIN, &mut rng),
    };
    let p = cfg.box_roi.output;
    let hw = cfg.box_head_width;
    let box_head = BoxHeadParams {
        fc1: Dense::init(&mut store, "box.fc1", d * p * p, hw, RELU_GAIN, &mut rng),
        fc2: Dense::init(&mut store, "box.fc2", hw, hw, RELU_GAIN, &mut rng),
        cls: Dense::init(&mut store, "box.cls", hw, cfg.num_classes + 1, PREDICTOR_GAIN, &mut rng),
        reg: Dense::init(&mut store, "box.reg", hw, 4, PREDICTOR_GAIN, &mut rng),
    };
    let mw = cfg.mask_head_width;
    let mask_head = MaskHeadParams {
        conv1: ConvParams::init(&mut store, "mask.conv1", d, mw, 3, 1, RELU_GAIN, &mut rng),
        conv2: ConvParams::init(&mut store, "mask.conv2", mw, mw, 3, 1, RELU_GAIN, &mut rng),
        predictor: ConvParams::init(&mut store, "mask.predictor", mw, cfg.num_classes, 1, 1, LINEAR_GAIN, &mut rng),
    };
    Ok(Model { cfg: cfg.clone(), store, backbone, fpn, rpn, box_head, mask_head })
}

/// RPN outputs of one level: objectness logits `A×H×W`, deltas `4A×H×W`.
#[derive(Clone, Copy, Debug)]
pub struct RpnLevel {
    pub level: usize,
    pub logits: Var,
    pub deltas: Var,
    pub height: usize,
    pub width: usize,
    /// Index of the level's first anchor in the flat anchor list.
    pub offset: usize,
}

/// Graph handles of one forward pass over an image.
pub struct Forward {
    pub pyramid: PyramidFeatures,
    pub rpn: Vec<RpnLevel>,
    pub anchors: Vec<Anchor>,
    pub height: usize,
    pub width: usize,
}

impl Forward {
    /// Flat positions of anchor `k`'s logit and its four deltas.
    fn locate(&self, k: usize) -> (&RpnLevel, usize, [usize; 4]) {
        let lvl = self.rpn.iter().rev().find(|l| l.offset <= k).expect("anchor inside some level");
        let a = self.anchors_per_location();
        let local = k - lvl.offset;
        let (cell, r) = (local / a, local % a);
        let hw = lvl.height * lvl.width;
        let logit = r * hw + cell;
        let deltas = [0, 1, 2, 3].map(|c| (4 * r + c) * hw + cell);
        (lvl, logit, deltas)
    }

    fn anchors_per_location(&self) -> usize {
        let l = &self.rpn[0];
        (self.rpn.get(1).map_or(self.anchors.len(), |n| n.offset) - l.offset) / (l.height * l.width)
    }
}

/// Per-image loss nodes (unweighted, already normalised).
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub rpn_cls: Var,
    pub rpn_reg: Option<Var>,
    pub head_cls: Var,
    pub head_reg: Option<Var>,
    pub mask: Option<Var>,
}

/// One scored instance from [`Model::detect`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceDetection {
    pub bbox: BBox,
    /// 0-based foreground class.
    pub class_id: usize,
    pub score: f64,
    /// Row-major `H×W` binary mask.
    pub mask: Vec<bool>,
}

/// Samples the instance mask on an `m×m` grid over `roi` (nearest pixel).
pub fn mask_target(mask: &[bool], h: usize, w: usize, roi: &BBox, m: usize) -> Vec<f64> {
    let [x1, y1, x2, y2] = roi.corners();
    let (sx, sy) = ((x2 - x1) / m as f64, (y2 - y1) / m as f64);
    let mut out = Vec::with_capacity(m * m);
    for v in 0..m {
        let y = y1 + (v as f64 + 0.5) * sy;
        for u in 0..m {
            let x = x1 + (u as f64 + 0.5) * sx;
            let inside = x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64;
            out.push(if inside && mask[y as usize * w + x as usize] { 1.0 } else { 0.0 });
        }
    }
    out
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn mask_resolution(&self) -> usize {
        2 * self.cfg.mask_roi.output
    }

    /// Backbone, FPN and RPN head over one `3×H×W` image.
    pub fn forward(&self, g: &mut Graph, b: &Bound, image: &Tensor) -> Result<Forward> {
        let (_, height, width) = image.chw()?;
        let x = g.input(image.clone());
        let c = self.backbone.forward(g, b, x)?;
        let pyramid = fpn_fuse(g, b, &self.fpn, &c, self.cfg.with_p6)?;
        let mut shapes = Vec::new();
        let mut rpn = Vec::new();
        let mut offset = 0;
        let a = self.cfg.anchors.per_location();
        for lvl in &pyramid.levels {
            let h = self.rpn.conv.forward(g, b, lvl.map)?;
            let h = g.relu(h)?;
            let logits = self.rpn.objectness.forward(g, b, h)?;
            let deltas = self.rpn.deltas.forward(g, b, h)?;
            let (_, lh, lw) = g.value(lvl.map).chw()?;
            shapes.push(LevelShape { level: lvl.level, height: lh, width: lw, stride: lvl.stride });
            rpn.push(RpnLevel { level: lvl.level, logits, deltas, height: lh, width: lw, offset });
            offset += lh * lw * a;
        }
        let anchors = generate_anchors(&shapes, &self.cfg.anchors)?;
        Ok(Forward { pyramid, rpn, anchors, height, width })
    }

    /// Objectness probability and decoded box of every anchor (values only).
    fn anchor_predictions(&self, g: &Graph, f: &Forward) -> (Vec<f64>, Vec<Option<BBox>>) {
        let clip = Some((f.width as f64, f.height as f64));
        let mut scores = Vec::with_capacity(f.anchors.len());
        let mut boxes = Vec::with_capacity(f.anchors.len());
        for (k, anchor) in f.anchors.iter().enumerate() {
            let (lvl, li, di) = f.locate(k);
            let logits = g.value(lvl.logits).data();
            let deltas = g.value(lvl.deltas).data();
            scores.push(sigmoid(logits[li]));
            let d = BoxDelta::from_slice(&di.map(|i| deltas[i]));
            boxes.push(decode_clamped(&anchor.bbox, &d, clip));
        }
        (scores, boxes)
    }

    /// Top-scoring decoded anchors after NMS, at most `post_nms`.
    pub fn proposals(&self, g: &Graph, f: &Forward, post_nms: usize) -> Result<Vec<BBox>> {
        let pc = &self.cfg.proposals;
        let (scores, boxes) = self.anchor_predictions(g, f);
        let mut order: Vec<usize> = (0..scores.len())
            .filter(|&k| boxes[k].is_some_and(|b| b.w >= pc.min_size && b.h >= pc.min_size))
            .collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(pc.pre_nms);
        let cand: Vec<BBox> = order.iter().map(|&k| boxes[k].expect("filtered")).collect();
        let cand_scores: Vec<f64> = order.iter().map(|&k| scores[k]).collect();
        let keep = nms(&cand, &cand_scores, pc.nms_iou, f64::NEG_INFINITY)?;
        Ok(keep.into_iter().take(post_nms).map(|i| cand[i]).collect())
    }

    fn roi_level(&self, roi: &BBox) -> usize {
        assign_level_with(roi, CANONICAL_LEVEL, self.cfg.canonical_roi, 2, 5)
    }

    /// Box-head logits `N×(K+1)` and class-agnostic deltas `N×4`.
    pub fn box_head(&self, g: &mut Graph, b: &Bound, f: &Forward, rois: &[BBox]) -> Result<(Var, Var)> {
        let mut rows = Vec::with_capacity(rois.len());
        for roi in rois {
            let lvl = f.pyramid.get(self.roi_level(roi)).expect("levels 2..5 exist");
            let feat = roi_align(g, lvl.map, lvl.stride as f64, roi, &self.cfg.box_roi)?;
            let n = g.value(feat).len();
            rows.push(g.reshape(feat, &[1, n])?);
        }
        let x = g.concat(&rows)?;
        let h = self.box_head.fc1.forward(g, b, x)?;
        let h = g.relu(h)?;
        let h = self.box_head.fc2.forward(g, b, h)?;
        let h = g.relu(h)?;
        let logits = self.box_head.cls.forward(g, b, h)?;
        let deltas = self.box_head.reg.forward(g, b, h)?;
        Ok((logits, deltas))
    }

    /// Mask probabilities `m×m` (flattened) of class `class_id` for one ROI.
    pub fn mask_head(&self, g: &mut Graph, b: &Bound, f: &Forward, roi: &BBox, class_id: usize) -> Result<Var> {
        let lvl = f.pyramid.get(self.roi_level(roi)).expect("levels 2..5 exist");
        let x = roi_align(g, lvl.map, lvl.stride as f64, roi, &self.cfg.mask_roi)?;
        let x = self.mask_head.conv1.forward(g, b, x)?;
        let x = g.relu(x)?;
        let x = self.mask_head.conv2.forward(g, b, x)?;
        let x = g.relu(x)?;
        let x = g.upsample_nearest(x, 2)?;
        let logits = self.mask_head.predictor.forward(g, b, x)?;
        let m = self.mask_resolution();
        let idx: Vec<usize> = (class_id * m * m..(class_id + 1) * m * m).collect();
        let sel = g.select(logits, &idx)?;
        g.sigmoid(sel)
    }

    /// Builds the per-image training losses.
    pub fn loss_nodes(&self, g: &mut Graph, b: &Bound, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<LossNodes> {
        let f = self.forward(g, b, &sample.image)?;
        let gts = &sample.boxes;

        // region proposal losses over the sampled anchors
        let anchor_boxes: Vec<BBox> = f.anchors.iter().map(|a| a.bbox).collect();
        let assign = assign_anchor_labels(&anchor_boxes, gts, &self.cfg.rpn_labels, rng);
        let sampled: Vec<usize> = assign.sampled_indices().collect();
        let mut logit_sel = Vec::with_capacity(sampled.len());
        let mut targets = Vec::with_capacity(sampled.len());
        for &k in &sampled {
            let (lvl, li, _) = f.locate(k);
            logit_sel.push((lvl.logits, li));
            targets.push(assign.sampled[k].target().expect("sampled anchors are labelled"));
        }
        let logits = gather(g, &logit_sel)?;
        let probs = g.sigmoid(logits)?;
        let s = g.binary_cross_entropy(probs, &targets)?;
        let rpn_cls = g.scale(s, 1.0 / sampled.len() as f64)?;

        let positives: Vec<(usize, usize)> = assign.positives().collect();
        let rpn_reg = if positives.is_empty() {
            None
        } else {
            let mut sel = Vec::new();
            let mut t = Vec::new();
            for &(k, j) in &positives {
                let (lvl, _, di) = f.locate(k);
                sel.extend(di.map(|i| (lvl.deltas, i)));
                t.extend(encode(&f.anchors[k].bbox, &gts[j]).to_array());
            }
            let pred = gather(g, &sel)?;
            let s = g.smooth_l1(pred, &t)?;
            Some(g.scale(s, 1.0 / positives.len() as f64)?)
        };

        // ROI sampling over proposals plus the ground truth itself
        let mut rois = self.proposals(g, &f, self.cfg.proposals.train_post_nms)?;
        rois.extend(gts.iter().copied());
        let rs = &self.cfg.roi_sampling;
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for (i, roi) in rois.iter().enumerate() {
            let best = gts
                .iter()
                .enumerate()
                .map(|(j, gt)| (iou(roi, gt), j))
                .fold(None, |acc: Option<(f64, usize)>, (v, j)| match acc {
                    Some((bv, _)) if bv >= v => acc,
                    _ => Some((v, j)),
                });
            match best {
                Some((v, j)) if v >= rs.fg_iou => fg.push((i, j)),
                _ => bg.push(i),
            }
        }
        fg.shuffle(rng);
        bg.shuffle(rng);
        fg.truncate(((rs.batch_size as f64) * rs.fg_fraction).round() as usize);
        bg.truncate(rs.batch_size.saturating_sub(fg.len()));
        let mut batch: Vec<BBox> = fg.iter().map(|&(i, _)| rois[i]).collect();
        batch.extend(bg.iter().map(|&i| rois[i]));
        let mut labels: Vec<usize> = fg.iter().map(|&(_, j)| sample.classes[j] + 1).collect();
        labels.extend(std::iter::repeat_n(0, bg.len()));

        let (logits, deltas) = self.box_head(g, b, &f, &batch)?;
        let s = g.softmax_cross_entropy(logits, &labels)?;
        let head_cls = g.scale(s, 1.0 / batch.len() as f64)?;
        let head_reg = if fg.is_empty() {
            None
        } else {
            let idx: Vec<usize> = (0..4 * fg.len()).collect();
            let pred = g.select(deltas, &idx)?;
            let t: Vec<f64> = fg.iter().flat_map(|&(i, j)| encode(&rois[i], &gts[j]).to_array()).collect();
            let s = g.smooth_l1(pred, &t)?;
            Some(g.scale(s, 1.0 / fg.len() as f64)?)
        };

        let m = self.mask_resolution();
        let (h, w) = (sample.height(), sample.width());
        let mut mask_terms = Vec::new();
        for &(i, j) in fg.iter().take(rs.max_mask_rois) {
            let probs = self.mask_head(g, b, &f, &rois[i], sample.classes[j])?;
            let target = mask_target(&sample.masks[j], h, w, &rois[i], m);
            let s = g.binary_cross_entropy(probs, &target)?;
            mask_terms.push(g.scale(s, 1.0 / target.len() as f64)?);
        }
        let mask = if mask_terms.is_empty() {
            None
        } else {
            let s = g.add_all(&mask_terms)?;
            Some(g.scale(s, 1.0 / mask_terms.len() as f64)?)
        };
        Ok(LossNodes { rpn_cls, rpn_reg, head_cls, head_reg, mask })
    }

    /// Scored, clipped, class-wise suppressed detections with pasted masks.
    pub fn detect(&self, image: &Tensor, conf_threshold: f64) -> Result<Vec<InstanceDetection>> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let f = self.forward(&mut g, &b, image)?;
        let rois = self.proposals(&g, &f, self.cfg.proposals.post_nms)?;
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let (logits, deltas) = self.box_head(&mut g, &b, &f, &rois)?;
        let k1 = self.cfg.num_classes + 1;
        let lv = g.value(logits).data().to_vec();
        let dv = g.value(deltas).data().to_vec();
        let clip = Some((f.width as f64, f.height as f64));
        let mut found: Vec<(BBox, usize, f64)> = Vec::new();
        for class in 0..self.cfg.num_classes {
            let mut boxes = Vec::new();
            let mut scores = Vec::new();
            for (r, roi) in rois.iter().enumerate() {
                let row = &lv[r * k1..(r + 1) * k1];
                let p = softmax(row)[class + 1];
                if p < conf_threshold {
                    continue;
                }
                if let Some(bx) = decode_clamped(roi, &BoxDelta::from_slice(&dv[4 * r..4 * r + 4]), clip) {
                    boxes.push(bx);
                    scores.push(p);
                }
            }
            for i in nms(&boxes, &scores, self.cfg.nms_iou, conf_threshold)? {
                found.push((boxes[i], class, scores[i]));
            }
        }
        found.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.1.cmp(&b.1)));
        found.truncate(self.cfg.proposals.post_nms);

        let m = self.mask_resolution();
        let mut out = Vec::with_capacity(found.len());
        for (bbox, class_id, score) in found {
            let probs = self.mask_head(&mut g, &b, &f, &bbox, class_id)?;
            let grid = g.value(probs).data();
            let mask = paste_mask(grid, m, &bbox, f.height, f.width, self.cfg.mask_threshold);
            out.push(InstanceDetection { bbox, class_id, score, mask });
        }
        Ok(out)
    }
}

/// Gathers scattered elements of several nodes into one rank-1 node.
fn gather(g: &mut Graph, picks: &[(Var, usize)]) -> Result<Var> {
    if picks.is_empty() {
        return Err(Error::Shape("gather of nothing".into()));
    }
    // group consecutive picks from the same node into one select
    let mut parts = Vec::new();
    let mut start = 0;
    while start < picks.len() {
        let v = picks[start].0;
        let mut end = start;
        while end < picks.len() && picks[end].0 == v {
            end += 1;
        }
        let idx: Vec<usize> = picks[start..end].iter().map(|p| p.1).collect();
        parts.push(g.select(v, &idx)?);
        start = end;
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat(&parts)
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Thresholds an `m×m` probability grid and pastes it into the box extent.
pub fn paste_mask(grid: &[f64], m: usize, bbox: &BBox, h: usize, w: usize, threshold: f64) -> Vec<bool> {
    let [x1, y1, x2, y2] = bbox.corners();
    let mut out = vec![false; h * w];
    for i in 0..h {
        let y = i as f64 + 0.5;
        if y < y1 || y >= y2 {
            continue;
        }
        let v = (((y - y1) / (y2 - y1)) * m as f64).floor().min((m - 1) as f64) as usize;
        for j in 0..w {
            let x = j as f64 + 0.5;
            if x < x1 || x >= x2 {
                continue;
            }
            let u = (((x - x1) / (x2 - x1)) * m as f64).floor().min((m - 1) as f64) as usize;
            out[i * w + j] = grid[v * m + u] >= threshold;
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.cfg.clone(), params: self.store.clone() }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let mut m = build_model(&c.config, 0)?;
        m.store.load_from(&c.params)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionVariant;
    use crate::pipeline::synth::{synth_dataset, SynthSpec};

    fn toy(v: AttentionVariant) -> ModelConfig {
        ModelConfig::toy(v)
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let a = build_model(&toy(AttentionVariant::Cbam), 1).unwrap();
        let b = build_model(&toy(AttentionVariant::Cbam), 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_ne!(a.store, b.store);
        let none = build_model(&toy(AttentionVariant::None), 1).unwrap();
        assert!(a.param_count() > none.param_count());
        assert_eq!(build_model(&toy(AttentionVariant::Cbam), 1).unwrap().store, a.store);
    }

    #[test]
    fn pyramid_shapes_on_64px() {
        let m = build_model(&toy(AttentionVariant::Se), 0).unwrap();
        let mut g = Graph::new();
        let b = m.store.bind(&mut g);
        let f = m.forward(&mut g, &b, &Tensor::full(&[3, 64, 64], 0.3)).unwrap();
        let sides: Vec<(usize, usize)> = f.rpn.iter().map(|l| (l.height, l.width)).collect();
        assert_eq!(sides, vec![(16, 16), (8, 8), (4, 4), (2, 2), (1, 1)]);
        assert_eq!(f.anchors.len(), 3 * (256 + 64 + 16 + 4 + 1));
        assert_eq!(f.anchors_per_location(), 3);
    }

    #[test]
    fn anchor_locations_match_map_layout() {
        let m = build_model(&toy(AttentionVariant::None), 0).unwrap();
        let mut g = Graph::new();
        let b = m.store.bind(&mut g);
        let f = m.forward(&mut g, &b, &Tensor::full(&[3, 64, 64], 0.3)).unwrap();
        for k in [0, 1, 2, 3, 47, 767, 768, 1000, f.anchors.len() - 1] {
            let (lvl, li, di) = f.locate(k);
            let a = &f.anchors[k];
            assert_eq!(lvl.level, a.level);
            let hw = lvl.height * lvl.width;
            let (r, cell) = (li / hw, li % hw);
            let stride = 1usize << lvl.level;
            assert_eq!(a.bbox.cx, ((cell % lvl.width) as f64 + 0.5) * stride as f64);
            assert_eq!(a.bbox.cy, ((cell / lvl.width) as f64 + 0.5) * stride as f64);
            assert_eq!(k - lvl.offset, cell * 3 + r);
            assert_eq!(di[0], 4 * r * hw + cell);
        }
    }

    #[test]
    fn mask_target_and_paste() {
        let mut mask = vec![false; 8 * 8];
        for i in 2..6 {
            for j in 2..6 {
                mask[i * 8 + j] = true;
            }
        }
        let roi = BBox::from_corners(2.0, 2.0, 6.0, 6.0).unwrap();
        assert!(mask_target(&mask, 8, 8, &roi, 4).iter().all(|&v| v == 1.0));
        let wide = BBox::from_corners(0.0, 0.0, 8.0, 8.0).unwrap();
        let t = mask_target(&mask, 8, 8, &wide, 4);
        assert_eq!(t, vec![0., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0.]);
        let pasted = paste_mask(&t, 4, &wide, 8, 8, 0.5);
        assert_eq!(pasted, mask);
    }

    #[test]
    fn losses_are_finite_and_differentiable() {
        let m = build_model(&toy(AttentionVariant::Cbam), 3).unwrap();
        let s = &synth_dataset(&SynthSpec::default(), 1, 1).unwrap()[0];
        let mut g = Graph::new();
        let b = m.store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = m.loss_nodes(&mut g, &b, s, &mut rng).unwrap();
        let mut terms = vec![l.rpn_cls, l.head_cls];
        terms.extend(l.rpn_reg);
        terms.extend(l.head_reg);
        terms.extend(l.mask);
        assert!(l.mask.is_some() && l.head_reg.is_some());
        let total = g.add_all(&terms).unwrap();
        assert!(g.value(total).item().is_finite());
        let grads = g.backward(total).unwrap();
        for &v in b.vars() {
            if let Some(t) = grads.get(v) {
                assert!(t.all_finite());
            }
        }
    }

    #[test]
    fn untrained_detection_on_noise_is_valid() {
        let m = build_model(&toy(AttentionVariant::Eca), 4).unwrap();
        let img = Tensor::from_fn(&[3, 64, 64], |i| ((i * 2654435761) % 1000) as f64 / 1000.0);
        for conf in [0.5, 0.0] {
            let dets = m.detect(&img, conf).unwrap();
            for d in &dets {
                assert!(d.score >= conf);
                let [x1, y1, x2, y2] = d.bbox.corners();
                assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 64.0 && y2 <= 64.0);
                assert_eq!(d.mask.len(), 64 * 64);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = build_model(&toy(AttentionVariant::Se), 9).unwrap();
        let json = serde_json::to_string(&m.checkpoint()).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        let m2 = Model::from_checkpoint(&back).unwrap();
        assert_eq!(m2.store, m.store);
    }
}
