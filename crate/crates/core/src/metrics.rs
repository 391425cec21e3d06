//! Box-level detection evaluation: greedy matching, precision / recall,
//! interpolated AP, and mAP at single IoU thresholds and over the
//! 0.50:0.05:0.95 sweep.
//!
//! Matching per (image, class): detections are visited by descending score
//! (ties: earlier input first); each takes the unmatched non-crowd ground
//! truth with the highest IoU if that IoU reaches the threshold (TP),
//! otherwise, if it overlaps a crowd region at the threshold, it is dropped
//! from scoring, otherwise it is an FP.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub iscrowd: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchFlag {
    Tp,
    Fp,
    /// Matched a crowd region; excluded from scoring.
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(score, flag, input index)` in visit order.
    pub visits: Vec<(f64, MatchFlag, usize)>,
    pub n_gt: usize,
    pub unmatched_gt: usize,
}

/// Descending score, ties by ascending index.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy matching of detections against ground truth of one image and class.
pub fn match_detections(dets: &[Detection], gts: &[GtRecord], iou_thr: f64) -> MatchResult {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let regular: Vec<&GtRecord> = gts.iter().filter(|g| !g.iscrowd).collect();
    let crowd: Vec<&GtRecord> = gts.iter().filter(|g| g.iscrowd).collect();
    let mut taken = vec![false; regular.len()];
    let mut visits = Vec::with_capacity(dets.len());
    for i in score_order(&scores) {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in regular.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= iou_thr && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, j));
            }
        }
        let flag = if let Some((_, j)) = best {
            taken[j] = true;
            MatchFlag::Tp
        } else if crowd.iter().any(|g| iou(&d.bbox, &g.bbox) >= iou_thr) {
            MatchFlag::Ignored
        } else {
            MatchFlag::Fp
        };
        visits.push((d.score, flag, i));
    }
    let matched = taken.iter().filter(|&&t| t).count();
    MatchResult { visits, n_gt: regular.len(), unmatched_gt: regular.len() - matched }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub n_gt: usize,
}

/// Cumulative precision `TP/(TP+FP)` and recall `TP/n_gt` along
/// score-sorted TP / FP flags.
pub fn pr_curve(flags: &[bool], n_gt: usize) -> PrCurve {
    let mut tp = 0usize;
    let mut curve = PrCurve { n_gt, ..Default::default() };
    for (k, &is_tp) in flags.iter().enumerate() {
        tp += is_tp as usize;
        curve.precision.push(tp as f64 / (k + 1) as f64);
        curve.recall.push(if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 });
    }
    curve
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApMethod {
    /// Mean of the envelope precision at recall 0, 0.01, …, 1.
    #[default]
    Interp101,
    /// Trapezoid area under the envelope, starting at recall 0.
    Trapezoid,
}

/// Precision made non-increasing from the right.
pub fn precision_envelope(precision: &[f64]) -> Vec<f64> {
    let mut env = precision.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    env
}

/// AP of a curve; `None` when there is no ground truth.
pub fn average_precision(curve: &PrCurve, method: ApMethod) -> Option<f64> {
    if curve.n_gt == 0 {
        return None;
    }
    if curve.precision.is_empty() {
        return Some(0.0);
    }
    let env = precision_envelope(&curve.precision);
    let ap = match method {
        ApMethod::Interp101 => {
            let mut sum = 0.0;
            for i in 0..=100 {
                let r = i as f64 / 100.0;
                let k = curve.recall.partition_point(|&x| x < r);
                if k < env.len() {
                    sum += env[k];
                }
            }
            sum / 101.0
        }
        ApMethod::Trapezoid => {
            let (mut prev_r, mut prev_p) = (0.0, env[0]);
            let mut area = 0.0;
            for (&r, &p) in curve.recall.iter().zip(&env) {
                area += (r - prev_r) * (p + prev_p) / 2.0;
                prev_r = r;
                prev_p = p;
            }
            area
        }
    };
    Some(ap.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    pub max_dets: usize,
    pub ap_method: ApMethod,
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

impl Default for EvalParams {
    fn default() -> Self {
        Self { iou_thresholds: coco_thresholds(), max_dets: 100, ap_method: ApMethod::Interp101 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub category_id: u64,
    pub ap: f64,
    pub n_gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub curve: PrCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub iou_threshold: f64,
    pub map: f64,
    pub classes: Vec<ClassResult>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_threshold: Vec<ThresholdResult>,
    pub map_50: Option<f64>,
    pub map_75: Option<f64>,
    /// Mean over the ten sweep thresholds; present when all ten were evaluated.
    pub map_coco: Option<f64>,
}

impl EvalReport {
    pub fn map_at(&self, thr: f64) -> Option<f64> {
        self.per_threshold.iter().find(|t| (t.iou_threshold - thr).abs() < 1e-12).map(|t| t.map)
    }
}

/// Evaluates `dets` against `gts` at every configured IoU threshold.
pub fn map_report(dets: &[Detection], gts: &[GtRecord], params: &EvalParams) -> Result<EvalReport> {
    let classes: BTreeSet<u64> = gts.iter().filter(|g| !g.iscrowd).map(|g| g.category_id).collect();
    if classes.is_empty() {
        return Err(Error::Record("no non-crowd ground truth to evaluate against".into()));
    }
    if params.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config(format!("IoU thresholds {:?} outside [0, 1]", params.iou_thresholds)));
    }

    // group by (class, image); BTreeMap keeps the reduction order canonical
    let mut gt_groups: BTreeMap<(u64, u64), Vec<GtRecord>> = BTreeMap::new();
    for g in gts {
        gt_groups.entry((g.category_id, g.image_id)).or_default().push(*g);
    }
    let mut det_groups: BTreeMap<(u64, u64), Vec<(usize, Detection)>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        if classes.contains(&d.category_id) {
            det_groups.entry((d.category_id, d.image_id)).or_default().push((i, *d));
        }
    }
    for group in det_groups.values_mut() {
        let scores: Vec<f64> = group.iter().map(|(_, d)| d.score).collect();
        let order = score_order(&scores);
        let mut kept: Vec<(usize, Detection)> = order.into_iter().take(params.max_dets).map(|k| group[k]).collect();
        kept.sort_by_key(|(i, _)| *i);
        *group = kept;
    }

    let mut per_threshold = Vec::with_capacity(params.iou_thresholds.len());
    for &thr in &params.iou_thresholds {
        let mut class_results = Vec::with_capacity(classes.len());
        for &cat in &classes {
            let mut visits: Vec<(f64, bool, usize)> = Vec::new();
            let mut n_gt = 0;
            let images: BTreeSet<u64> = gt_groups
                .keys()
                .chain(det_groups.keys())
                .filter(|(c, _)| *c == cat)
                .map(|(_, img)| *img)
                .collect();
            for img in images {
                let g = gt_groups.get(&(cat, img)).map(Vec::as_slice).unwrap_or(&[]);
                let group = det_groups.get(&(cat, img)).map(Vec::as_slice).unwrap_or(&[]);
                let d: Vec<Detection> = group.iter().map(|(_, d)| *d).collect();
                let m = match_detections(&d, g, thr);
                n_gt += m.n_gt;
                for (score, flag, k) in m.visits {
                    if flag != MatchFlag::Ignored {
                        visits.push((score, flag == MatchFlag::Tp, group[k].0));
                    }
                }
            }
            visits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));
            let flags: Vec<bool> = visits.iter().map(|v| v.1).collect();
            let curve = pr_curve(&flags, n_gt);
            let tp = flags.iter().filter(|&&f| f).count();
            let ap = average_precision(&curve, params.ap_method).expect("class has ground truth");
            class_results.push(ClassResult { category_id: cat, ap, n_gt, tp, fp: flags.len() - tp, curve });
        }
        let map = class_results.iter().map(|c| c.ap).sum::<f64>() / class_results.len() as f64;
        let tp = class_results.iter().map(|c| c.tp).sum();
        let fp = class_results.iter().map(|c| c.fp).sum();
        let n_gt: usize = class_results.iter().map(|c| c.n_gt).sum();
        per_threshold.push(ThresholdResult { iou_threshold: thr, map, classes: class_results, tp, fp, fn_: n_gt - tp });
    }

    let mut report = EvalReport { per_threshold, map_50: None, map_75: None, map_coco: None };
    report.map_50 = report.map_at(0.5);
    report.map_75 = report.map_at(0.75);
    let sweep: Option<Vec<f64>> = coco_thresholds().iter().map(|&t| report.map_at(t)).collect();
    report.map_coco = sweep.map(|v| v.iter().sum::<f64>() / v.len() as f64);
    Ok(report)
}

/// Fixed-width text table: one row per model, columns mAP^0.5, mAP^0.75, mAP^COCO.
pub fn format_table(title: &str, rows: &[(String, &EvalReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(5).max(5);
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut out = format!("{title}\n\n");
    out.push_str(&format!("{:<name_w$}  {:>9}  {:>9}  {:>9}\n", "Model", "mAP^0.5", "mAP^0.75", "mAP^COCO"));
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<name_w$}  {:>9}  {:>9}  {:>9}\n",
            name,
            cell(r.map_50),
            cell(r.map_75),
            cell(r.map_coco)
        ));
    }
    out
}
