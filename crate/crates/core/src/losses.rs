//! Anchor labelling and the three-part detection loss.
//!
//! `L = (1/N_cls)·Σ L_cls + (1/N_reg)·Σ L_reg + L_mask`, where `L_cls` is
//! binary cross-entropy on an objectness probability, `L_reg` is smooth-L1
//! summed over the four box-delta components, and `L_mask` is per-pixel
//! binary cross-entropy averaged over the `p×p` mask grid.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox, BoxDelta};
use crate::error::{Error, Result};
use crate::graph::{bce_term, smooth_l1, Graph, Var, PROB_EPS};
use crate::tensor::pairwise_sum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive { gt: usize },
    Negative,
    Ignore,
}

impl AnchorLabel {
    pub fn target(self) -> Option<f64> {
        match self {
            Self::Positive { .. } => Some(1.0),
            Self::Negative => Some(0.0),
            Self::Ignore => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub batch_size: usize,
    pub positive_fraction: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self { positive_iou: 0.7, negative_iou: 0.3, batch_size: 256, positive_fraction: 0.5 }
    }
}

/// Labels before and after minibatch subsampling.
#[derive(Clone, Debug)]
pub struct AnchorAssignment {
    /// Threshold labels for every anchor.
    pub labels: Vec<AnchorLabel>,
    /// Labels with everything outside the sampled minibatch set to `Ignore`.
    pub sampled: Vec<AnchorLabel>,
}

impl AnchorAssignment {
    pub fn sampled_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.sampled.iter().enumerate().filter(|(_, l)| **l != AnchorLabel::Ignore).map(|(i, _)| i)
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sampled.iter().enumerate().filter_map(|(i, l)| match l {
            AnchorLabel::Positive { gt } => Some((i, *gt)),
            _ => None,
        })
    }
}

/// Threshold labelling: positive at IoU ≥ `positive_iou` or when the anchor
/// is a best match for some ground truth; negative at max IoU ≤
/// `negative_iou`; ignore in between.
pub fn label_anchors(anchors: &[BBox], gts: &[BBox], cfg: &LabelConfig) -> Vec<AnchorLabel> {
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    if gts.is_empty() {
        return labels;
    }
    let mut best_for_gt = vec![0.0f64; gts.len()];
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(anchors.len());
    let ious: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
    for row in &ious {
        let mut m = (row[0], 0);
        for (j, &v) in row.iter().enumerate() {
            if v > m.0 {
                m = (v, j);
            }
            best_for_gt[j] = best_for_gt[j].max(v);
        }
        best.push(m);
    }
    for (i, &(m, j)) in best.iter().enumerate() {
        labels[i] = if m >= cfg.positive_iou {
            AnchorLabel::Positive { gt: j }
        } else if m <= cfg.negative_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    for (j, &bm) in best_for_gt.iter().enumerate() {
        if bm <= 0.0 {
            continue;
        }
        for (i, row) in ious.iter().enumerate() {
            if row[j] == bm && !matches!(labels[i], AnchorLabel::Positive { .. }) {
                labels[i] = AnchorLabel::Positive { gt: j };
            }
        }
    }
    labels
}

/// [`label_anchors`] followed by random subsampling to at most
/// `batch_size` anchors, of which at most `positive_fraction` positive.
pub fn assign_anchor_labels(anchors: &[BBox], gts: &[BBox], cfg: &LabelConfig, rng: &mut ChaCha8Rng) -> AnchorAssignment {
    let labels = label_anchors(anchors, gts, cfg);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| matches!(labels[i], AnchorLabel::Positive { .. })).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    let max_pos = (cfg.batch_size as f64 * cfg.positive_fraction).floor() as usize;
    pos.shuffle(rng);
    pos.truncate(max_pos);
    let max_neg = cfg.batch_size - pos.len();
    neg.shuffle(rng);
    neg.truncate(max_neg);
    let mut sampled = vec![AnchorLabel::Ignore; labels.len()];
    for i in pos.into_iter().chain(neg) {
        sampled[i] = labels[i];
    }
    AnchorAssignment { labels, sampled }
}

/// `−ln[p·p* + (1−p*)(1−p)]` with `p` clamped to `[ε, 1−ε]`.
pub fn cls_loss(p: f64, label: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(p * label + (1.0 - label) * (1.0 - p)).ln()
}

/// Smooth-L1 summed over `(tx, ty, tw, th)`.
pub fn reg_loss(t: &BoxDelta, target: &BoxDelta) -> f64 {
    t.to_array().iter().zip(target.to_array()).map(|(a, b)| smooth_l1(a - b)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskTarget {
    /// Binary ground truth, row-major `p×p`.
    pub target: Vec<f64>,
    /// Predicted probabilities, row-major `p×p`.
    pub pred: Vec<f64>,
    pub class_id: usize,
}

/// Mean binary cross-entropy over the mask grid.
pub fn mask_loss(m: &MaskTarget) -> Result<f64> {
    if m.target.len() != m.pred.len() || m.pred.is_empty() {
        return Err(Error::Shape(format!("mask of {} predictions vs {} targets", m.pred.len(), m.target.len())));
    }
    let terms: Vec<f64> = m.pred.iter().zip(&m.target).map(|(&y, &t)| bce_term(y, t)).collect();
    Ok(pairwise_sum(&terms) / m.pred.len() as f64)
}

/// Per-term multipliers on the three components. All 1 reproduces the
/// unweighted composition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, reg: 1.0, mask: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_mask: f64,
    pub total: f64,
    pub n_cls: usize,
    pub n_reg: usize,
}

impl LossReport {
    /// Recomposes the total from the three components.
    pub fn recompose(&self) -> f64 {
        self.l_cls + self.l_reg + self.l_mask
    }
}

pub fn total_loss(cls_terms: &[f64], reg_terms: &[f64], mask: f64, n_cls: usize, n_reg: usize) -> Result<LossReport> {
    if n_cls == 0 || n_reg == 0 {
        return Err(Error::Config("loss normalisers must be positive".into()));
    }
    let l_cls = pairwise_sum(cls_terms) / n_cls as f64;
    let l_reg = pairwise_sum(reg_terms) / n_reg as f64;
    let report = LossReport { l_cls, l_reg, l_mask: mask, total: l_cls + l_reg + mask, n_cls, n_reg };
    if ![report.l_cls, report.l_reg, report.l_mask].iter().all(|v| v.is_finite() && *v >= 0.0) {
        return Err(Error::NonFinite(format!("loss components {report:?}")));
    }
    Ok(report)
}

/// Graph form of `Σ L_cls` over probabilities and binary labels.
pub fn cls_loss_node(g: &mut Graph, probs: Var, labels: &[f64]) -> Result<Var> {
    g.binary_cross_entropy(probs, labels)
}

/// Graph form of `Σ L_reg`; `pred` holds `4·n` deltas.
pub fn reg_loss_node(g: &mut Graph, pred: Var, targets: &[BoxDelta]) -> Result<Var> {
    let flat: Vec<f64> = targets.iter().flat_map(|d| d.to_array()).collect();
    g.smooth_l1(pred, &flat)
}

/// Graph form of `L_mask` for one ROI.
pub fn mask_loss_node(g: &mut Graph, probs: Var, target: &[f64]) -> Result<Var> {
    let s = g.binary_cross_entropy(probs, target)?;
    g.scale(s, 1.0 / target.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::f64::consts::LN_2;

    /// The mask loss with its second term exactly as typeset, without the log.
    fn mask_loss_as_printed(pred: &[f64], target: &[f64]) -> f64 {
        let s: f64 = pred
            .iter()
            .zip(target)
            .map(|(&y, &t)| {
                let y = y.clamp(PROB_EPS, 1.0 - PROB_EPS);
                t * y.ln() + (1.0 - t) * (1.0 - y)
            })
            .sum();
        -s / pred.len() as f64
    }

    #[test]
    fn cls_fixtures() {
        assert!(cls_loss(1.0, 1.0) < 1e-6);
        assert!((cls_loss(0.5, 1.0) - LN_2).abs() < 1e-12);
        assert!((cls_loss(0.5, 0.0) - LN_2).abs() < 1e-12);
        let guarded = cls_loss(0.0, 1.0);
        assert!(guarded.is_finite());
        assert!((guarded + 1e-7f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn reg_fixtures() {
        let z = BoxDelta::ZERO;
        assert_eq!(reg_loss(&z, &z), 0.0);
        assert_eq!(reg_loss(&BoxDelta { tx: 0.5, ..z }, &z), 0.125);
        assert_eq!(reg_loss(&BoxDelta { tx: 2.0, ..z }, &z), 1.5);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert!((smooth_l1(1.0 - 1e-12) - 0.5).abs() < 1e-11);
    }

    #[test]
    fn mask_fixtures() {
        let perfect = MaskTarget { target: vec![1.0, 0.0, 0.0, 1.0], pred: vec![1.0, 0.0, 0.0, 1.0], class_id: 0 };
        assert!(mask_loss(&perfect).unwrap() < 1e-6);
        for t in [0.0, 1.0] {
            let half = MaskTarget { target: vec![t; 49], pred: vec![0.5; 49], class_id: 1 };
            assert!((mask_loss(&half).unwrap() - LN_2).abs() < 1e-12);
        }
        // refining 7×7 → 14×14 with identical per-cell terms keeps the mean
        let coarse_t: Vec<f64> = (0..49).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let coarse_p: Vec<f64> = (0..49).map(|i| 0.1 + 0.8 * ((i * 7) % 11) as f64 / 11.0).collect();
        let refine = |v: &[f64]| -> Vec<f64> { (0..196).map(|i| v[(i / 14 / 2) * 7 + (i % 14) / 2]).collect() };
        let a = mask_loss(&MaskTarget { target: coarse_t.clone(), pred: coarse_p.clone(), class_id: 0 }).unwrap();
        let b = mask_loss(&MaskTarget { target: refine(&coarse_t), pred: refine(&coarse_p), class_id: 0 }).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(mask_loss(&MaskTarget { target: vec![1.0], pred: vec![], class_id: 0 }).is_err());
    }

    #[test]
    fn printed_mask_form_differs() {
        let p = [0.3, 0.8];
        let t = [0.0, 1.0];
        let standard = mask_loss(&MaskTarget { target: t.to_vec(), pred: p.to_vec(), class_id: 0 }).unwrap();
        let printed = mask_loss_as_printed(&p, &t);
        assert!((standard - printed).abs() > 0.1);
        // the printed form is not zero at a perfect prediction of a background pixel
        assert!((mask_loss_as_printed(&[0.0], &[0.0]) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn total_composition() {
        let r = total_loss(&[LN_2, LN_2], &[0.125], LN_2, 2, 100).unwrap();
        assert!((r.total - 1.387_544_361_119_890_6).abs() < 1e-12);
        assert!((r.total - 1.38754).abs() < 1e-5);
        assert_eq!(r.total, r.recompose());
        let zero = total_loss(&[0.0], &[0.0], 0.0, 1, 1).unwrap();
        assert_eq!(zero.total, 0.0);
        let c = 0.375;
        let shifted = total_loss(&[LN_2, LN_2], &[0.125], LN_2 + c, 2, 100).unwrap();
        assert!((shifted.total - r.total - c).abs() < 1e-15);
        assert!(total_loss(&[], &[], 0.0, 0, 1).is_err());
    }

    fn sq(cx: f64, cy: f64, s: f64) -> BBox {
        BBox::new(cx, cy, s, s).unwrap()
    }

    #[test]
    fn labelling_rules() {
        let gt = [sq(10.0, 10.0, 10.0)];
        let anchors = [
            sq(10.0, 10.0, 10.0),                   // identical
            sq(100.0, 100.0, 10.0),                 // disjoint
            BBox::new(10.0, 10.0, 20.0, 10.0).unwrap(), // IoU 0.5
        ];
        let l = label_anchors(&anchors, &gt, &LabelConfig::default());
        assert_eq!(l, vec![AnchorLabel::Positive { gt: 0 }, AnchorLabel::Negative, AnchorLabel::Ignore]);
    }

    #[test]
    fn argmax_rescue() {
        let gt = [sq(10.0, 10.0, 10.0)];
        let anchors = [BBox::new(10.0, 10.0, 20.0, 10.0).unwrap(), sq(100.0, 100.0, 10.0)];
        let l = label_anchors(&anchors, &gt, &LabelConfig::default());
        assert_eq!(l[0], AnchorLabel::Positive { gt: 0 });
        assert_eq!(l[1], AnchorLabel::Negative);
    }

    #[test]
    fn subsampling_caps() {
        let gt: Vec<BBox> = (0..4).map(|i| sq(20.0 * i as f64 + 10.0, 10.0, 10.0)).collect();
        let mut anchors = Vec::new();
        for i in 0..300 {
            anchors.push(sq((i % 4) as f64 * 20.0 + 10.0, 10.0, 10.0));
            anchors.push(sq(500.0 + i as f64, 500.0, 10.0));
        }
        let cfg = LabelConfig { batch_size: 64, ..LabelConfig::default() };
        let a = assign_anchor_labels(&anchors, &gt, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(a.positives().count(), 32);
        assert_eq!(a.sampled_indices().count(), 64);
        let b = assign_anchor_labels(&anchors, &gt, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(a.sampled, b.sampled);
    }
}
