//! Acceptance report: one PASS / FAIL line per criterion, then a single
//! assertion over all of them. Run with `--nocapture` to see the lines.

mod common;

use std::time::{Duration, Instant};

use attnmask::attention::{AttentionConfig, AttentionParams, AttentionVariant};
use attnmask::boxes::{decode, encode, generate_anchors, iou, nms, AnchorConfig, BBox, BoxDelta, LevelShape};
use attnmask::gradsuite::{run_group, run_suite, SuiteGroup, SUITE_SEEDS};
use attnmask::graph::{Graph, PoolMode};
use attnmask::losses::{cls_loss, mask_loss, reg_loss, total_loss, MaskTarget};
use attnmask::metrics::{average_precision, coco_thresholds, map_report, pr_curve, ApMethod, Detection, EvalParams};
use attnmask::params::ParamStore;
use attnmask::pipeline::config::RunConfig;
use attnmask::pipeline::run::{compare, run_toy};
use attnmask::pipeline::train::window_mean;
use attnmask::roi_align::{roi_align_taps, RoiAlignConfig};
use attnmask::Tensor;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_RUNTIME: Duration = Duration::from_secs(120);
const CLOSED_FORM_TOL: f64 = 0.0;
const NMS_INSTANCES: usize = 500;
const ROUND_TRIP_TOL: f64 = 1e-9;
const IOU_TOL: f64 = 1e-12;
const ANCHOR_AREA_TOL: f64 = 1e-6;
const CONSTANT_MAP_TOL: f64 = 1e-12;
const ROI_INSTANCES: usize = 200;
const ROI_ORACLE_TOL: f64 = 1e-6;
const MAP_MEAN_TOL: f64 = 1e-12;
const MAP_INSTANCES: usize = 200;
const MAP_ORACLE_TOL: f64 = 1e-9;
const LN2_TOL: f64 = 1e-12;
const COMPOSITION: f64 = 1.38754;
const COMPOSITION_TOL: f64 = 1e-5;
const REFINEMENT_TOL: f64 = 1e-12;
const SMOKE_SEED: u64 = 0;
const SMOKE_BUDGET: Duration = Duration::from_secs(600);
const EARLY_WINDOW: (usize, usize) = (10, 60);
const TRAILING_STEPS: usize = 50;
const HALVING: f64 = 0.5;
const MAP50_BAR: f64 = 0.5;

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, id: usize, title: &str, checks: &[(&str, bool)], detail: String) {
        let ok = checks.iter().all(|c| c.1);
        let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
        let mut line = format!("criterion {id:>2} [{}] {title}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !failed.is_empty() {
            line.push_str(&format!(" (failed: {})", failed.join(", ")));
        }
        println!("{line}");
        self.lines.push((id, ok, line));
    }
}

fn gradient_suite(r: &mut Report) {
    let start = Instant::now();
    let mut outcomes = Vec::new();
    for g in SuiteGroup::ALL {
        outcomes.extend(run_group(g, SUITE_SEEDS).unwrap());
    }
    let elapsed = start.elapsed();
    let worst = outcomes.iter().map(|o| o.worst.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
    r.record(
        1,
        "gradient suite",
        &[("all suites pass", failing.is_empty()), ("ten suites", outcomes.len() == 10), ("runtime", elapsed < GRAD_RUNTIME)],
        format!("{} suites x {SUITE_SEEDS} seeds, worst rel err {worst:.2e}, {:.1}s", outcomes.len(), elapsed.as_secs_f64()),
    );
}

fn closed_form_attention(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for trial in 0..10 {
        let x = Tensor::from_fn(&[8 + 8 * (trial % 2), 5, 7], |_| rng.gen_range(-4.0..4.0));
        for (variant, factor) in [(AttentionVariant::Cbam, 0.25), (AttentionVariant::Se, 0.5), (AttentionVariant::Eca, 0.5)] {
            let mut store = ParamStore::new();
            let cfg = AttentionConfig::new(x.shape()[0], variant).with_reduction(4);
            let p = AttentionParams::init(&mut store, "a", &cfg, &mut rng).unwrap();
            for t in store.tensors_mut() {
                *t = Tensor::zeros(t.shape());
            }
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let xv = g.input(x.clone());
            let y = p.forward(&mut g, &b, xv).unwrap();
            for (a, v) in g.value(y).data().iter().zip(x.data()) {
                worst = worst.max((a - factor * v).abs());
            }
        }
    }
    r.record(
        2,
        "zero-parameter attention",
        &[("exact", worst <= CLOSED_FORM_TOL)],
        format!("max |y - kF| = {worst:e} over 10 random inputs (CBAM k=0.25, SE/ECA k=0.5)"),
    );
}

fn geometry(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut nms_mismatch = 0;
    for _ in 0..NMS_INSTANCES {
        let (boxes, scores, it, st) = nms_instance(&mut rng);
        let bb: Vec<BBox> = boxes.iter().map(|&c| to_bbox(c)).collect();
        nms_mismatch += (nms(&bb, &scores, it, st).unwrap() != ref_nms(&boxes, &scores, it, st)) as usize;
    }
    let mut round_trip = 0.0f64;
    for _ in 0..1000 {
        let mut c = || {
            let x = rng.gen_range(-100.0..100.0);
            let y = rng.gen_range(-100.0..100.0);
            to_bbox([x, y, x + rng.gen_range(0.5..80.0), y + rng.gen_range(0.5..80.0)])
        };
        let (a, t) = (c(), c());
        let back = decode(&a, &encode(&a, &t)).unwrap();
        for (u, v) in [(back.cx, t.cx), (back.cy, t.cy), (back.w, t.w), (back.h, t.h)] {
            round_trip = round_trip.max((u - v).abs() / v.abs().max(1e-300));
        }
    }
    let fixture = iou(&to_bbox([0.0, 0.0, 10.0, 10.0]), &BBox::from_coco([5.0, 5.0, 10.0, 10.0]).unwrap());
    let cfg = AnchorConfig { scales: vec![8.0, 16.0, 32.0, 64.0, 128.0], ..AnchorConfig::default() };
    let levels: Vec<LevelShape> =
        (2..=6).map(|l| LevelShape { level: l, height: 64 >> l, width: 64 >> l, stride: 1 << l }).collect();
    let anchors = generate_anchors(&levels, &cfg).unwrap();
    let mut counts_ok = true;
    let mut area_err = 0.0f64;
    for ls in &levels {
        let on: Vec<_> = anchors.iter().filter(|a| a.level == ls.level).collect();
        counts_ok &= on.len() == 3 * ls.height * ls.width;
        let s = cfg.scale_for_level(ls.level).unwrap();
        for a in on {
            area_err = area_err.max((a.bbox.area() - s * s).abs() / (s * s));
        }
    }
    r.record(
        3,
        "geometry oracles",
        &[
            ("nms", nms_mismatch == 0),
            ("round trip", round_trip < ROUND_TRIP_TOL),
            ("iou fixture", (fixture - 1.0 / 7.0).abs() <= IOU_TOL),
            ("anchor areas", area_err <= ANCHOR_AREA_TOL),
            ("anchor counts", counts_ok),
        ],
        format!(
            "nms mismatches {nms_mismatch}/{NMS_INSTANCES}, round trip {round_trip:.1e}, iou {fixture:.15}, anchor area err {area_err:.1e}"
        ),
    );
}

fn roi_align(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut const_err = 0.0f64;
    for _ in 0..50 {
        let c = rng.gen_range(-5.0..5.0);
        let (h, w, stride) = (rng.gen_range(2..10), rng.gen_range(2..10), 4.0);
        let feature = Tensor::from_fn(&[2, h, w], |_| c);
        let x1 = rng.gen_range(0.0..w as f64 * stride * 0.5);
        let y1 = rng.gen_range(0.0..h as f64 * stride * 0.5);
        let roi = to_bbox([x1, y1, rng.gen_range(x1 + 0.5..w as f64 * stride), rng.gen_range(y1 + 0.5..h as f64 * stride)]);
        for mode in [PoolMode::Max, PoolMode::Avg] {
            let (out, _) = roi_align_taps(&feature, stride, &roi, &RoiAlignConfig { output: 3, aggregation: mode }).unwrap();
            const_err = const_err.max(out.data().iter().map(|v| (v - c).abs()).fold(0.0, f64::max));
        }
    }
    let mut oracle_err = 0.0f64;
    for _ in 0..ROI_INSTANCES {
        let (feature, stride, roi, p) = roi_instance(&mut rng);
        let (out, _) =
            roi_align_taps(&feature, stride, &to_bbox(roi), &RoiAlignConfig { output: p, aggregation: PoolMode::Max }).unwrap();
        let want = ref_roi_align(&feature, stride, roi, p, true);
        oracle_err = out.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(oracle_err, f64::max);
    }
    let grads: Vec<_> = ["roi_align_max", "roi_align_avg"].iter().map(|s| run_suite(s, SUITE_SEEDS).unwrap()).collect();
    r.record(
        4,
        "ROI Align",
        &[
            ("constant map", const_err <= CONSTANT_MAP_TOL),
            ("raster oracle", oracle_err < ROI_ORACLE_TOL),
            ("gradient", grads.iter().all(|o| o.passed())),
        ],
        format!(
            "constant-map err {const_err:.1e}, oracle err {oracle_err:.1e} on {ROI_INSTANCES} ROIs, grad worst {:.1e}",
            grads.iter().map(|o| o.worst.max_rel_err).fold(0.0, f64::max)
        ),
    );
}

fn metrics(r: &mut Report) {
    let ap = |flags: &[bool]| average_precision(&pr_curve(flags, 1), ApMethod::Interp101).unwrap();
    let (ap_one, ap_half) = (ap(&[true, false]), ap(&[false, true]));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut perfect_ok = true;
    let mut mean_err = 0.0f64;
    let mut oracle_err = 0.0f64;
    for _ in 0..MAP_INSTANCES {
        let (dets, gts) = eval_instance(&mut rng);
        let perfect: Vec<Detection> = gts
            .iter()
            .filter(|g| !g.iscrowd)
            .map(|g| Detection { image_id: g.image_id, category_id: g.category_id, bbox: g.bbox, score: 1.0 })
            .collect();
        let p = map_report(&perfect, &gts, &EvalParams::default()).unwrap();
        perfect_ok &= p.map_50 == Some(1.0) && p.map_75 == Some(1.0) && p.map_coco == Some(1.0);

        let report = map_report(&dets, &gts, &EvalParams::default()).unwrap();
        let mean = report.per_threshold.iter().map(|t| t.map).sum::<f64>() / 10.0;
        mean_err = mean_err.max((report.map_coco.unwrap() - mean).abs());
        for (t, thr) in report.per_threshold.iter().zip(coco_thresholds()) {
            oracle_err = oracle_err.max((t.map - ref_map(&dets, &gts, thr)).abs());
        }
    }
    r.record(
        5,
        "metric suite",
        &[
            ("AP 1.0 fixture", ap_one == 1.0),
            ("AP 0.5 fixture", ap_half == 0.5),
            ("perfect predictions", perfect_ok),
            ("COCO mean", mean_err <= MAP_MEAN_TOL),
            ("exhaustive reference", oracle_err < MAP_ORACLE_TOL),
        ],
        format!(
            "AP fixtures {ap_one} / {ap_half}, COCO mean err {mean_err:.1e}, reference err {oracle_err:.1e} on {MAP_INSTANCES} instances"
        ),
    );
}

fn losses(r: &mut Report) {
    let sl1 = |d: f64| reg_loss(&BoxDelta::from_slice(&[d, 0.0, 0.0, 0.0]), &BoxDelta::from_slice(&[0.0; 4]));
    let cls = cls_loss(0.5, 1.0);
    let (a, b) = (sl1(0.5), sl1(2.0));
    let continuity = [1e-3, 1e-6, 1e-9]
        .iter()
        .flat_map(|&e| [1.0, -1.0].map(|s| (sl1(s * (1.0 + e)) - sl1(s * (1.0 - e))).abs() <= 2.0 * 2.0 * e))
        .all(|x| x);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let coarse_t: Vec<f64> = (0..49).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
    let coarse_p: Vec<f64> = (0..49).map(|_| rng.gen_range(0.01..0.99)).collect();
    let refine = |v: &[f64]| -> Vec<f64> { (0..196).map(|i| v[(i / 14 / 2) * 7 + (i % 14) / 2]).collect() };
    let m7 = mask_loss(&MaskTarget { target: coarse_t.clone(), pred: coarse_p.clone(), class_id: 0 }).unwrap();
    let m14 = mask_loss(&MaskTarget { target: refine(&coarse_t), pred: refine(&coarse_p), class_id: 0 }).unwrap();

    let ln2 = std::f64::consts::LN_2;
    let total = total_loss(&[ln2, ln2], &[0.125], ln2, 2, 100).unwrap().total;
    r.record(
        6,
        "loss fixtures",
        &[
            ("cls ln 2", (cls - ln2).abs() <= LN2_TOL),
            ("smooth-L1 0.5", a == 0.125),
            ("smooth-L1 2", b == 1.5),
            ("continuity", continuity),
            ("mask refinement", (m7 - m14).abs() <= REFINEMENT_TOL),
            ("composition", (total - COMPOSITION).abs() <= COMPOSITION_TOL),
        ],
        format!("cls {cls:.15}, smooth-L1 {a} / {b}, mask 7x7 {m7:.12} vs 14x14 {m14:.12}, total {total:.6}"),
    );
}

fn training(r: &mut Report) {
    let cfg = RunConfig::default();
    let timed = || {
        let start = Instant::now();
        let run = run_toy(&cfg, AttentionVariant::Cbam, SMOKE_SEED, |_| {});
        (run, start.elapsed())
    };
    let (first, t1) = timed();
    let (second, t2) = timed();
    let (first, second) = match (first, second) {
        (Ok(a), Ok(b)) => (a, b),
        (a, b) => {
            let msg = format!("{:?} / {:?}", a.err(), b.err());
            r.record(7, "learning-rate schedule", &[("training ran", false)], msg.clone());
            r.record(8, "training smoke", &[("training ran", false)], msg.clone());
            r.record(9, "held-out mAP@0.5", &[("training ran", false)], msg);
            return;
        }
    };

    let spe = cfg.train.steps_per_epoch;
    let mut distinct: Vec<f64> = first.trace.iter().map(|s| s.lr).collect();
    distinct.dedup();
    let boundaries: Vec<usize> = first.trace.windows(2).filter(|w| w[0].lr != w[1].lr).map(|w| w[1].step).collect();
    r.record(
        7,
        "learning-rate schedule",
        &[
            ("values", distinct == [0.002, 0.0002, 0.00002]),
            ("boundaries", boundaries == [16 * spe, 22 * spe]),
            ("length", first.trace.len() == 26 * spe),
        ],
        format!("lr {distinct:?} switching at steps {boundaries:?} of {}", first.trace.len()),
    );

    let n = first.trace.len();
    let early = window_mean(&first.trace, EARLY_WINDOW.0, EARLY_WINDOW.1);
    let late = window_mean(&first.trace, n - TRAILING_STEPS, n);
    let finite = first.trace.iter().all(|s| [s.l_cls, s.l_reg, s.l_mask, s.l_total].iter().all(|v| v.is_finite()));
    let identical = first.trace == second.trace && first.model.store == second.model.store;
    r.record(
        8,
        "training smoke",
        &[
            ("budget", t1.max(t2) <= SMOKE_BUDGET),
            ("loss halves", late <= HALVING * early),
            ("finite", finite),
            ("bit-identical rerun", identical),
        ],
        format!(
            "cbam seed {SMOKE_SEED}, {n} steps in {:.0}s / {:.0}s, early {early:.4}, trailing {late:.4} (ratio {:.3})",
            t1.as_secs_f64(),
            t2.as_secs_f64(),
            late / early
        ),
    );

    let m50 = first.summary.report.map_50.unwrap_or(0.0);
    r.record(
        9,
        "held-out mAP@0.5",
        &[("bar", m50 >= MAP50_BAR)],
        format!("{m50:.4} on {} held-out images (bar {MAP50_BAR})", cfg.eval_images),
    );
}

fn compare_harness(r: &mut Report) {
    let cmp = match compare(&RunConfig::default(), SMOKE_SEED, |_, _| {}) {
        Ok(c) => c,
        Err(e) => {
            r.record(10, "compare harness", &[("completed", false)], e.to_string());
            return;
        }
    };
    let hashes_equal = cmp.runs.iter().all(|s| s.train_hash == cmp.runs[0].train_hash && s.eval_hash == cmp.runs[0].eval_hash);
    let table = cmp.table();
    let rows: Vec<&str> = table.lines().filter(|l| l.starts_with("Mask RCNN")).collect();
    let cells_ok = rows.iter().all(|l| l.split_whitespace().rev().take(3).all(|c| c.parse::<f64>().is_ok()));
    println!("{table}");
    r.record(
        10,
        "compare harness",
        &[("four variants", cmp.runs.len() == 4), ("identical data", hashes_equal), ("4x3 table", rows.len() == 4 && cells_ok)],
        format!("train hash {}..., {} rows", &cmp.runs[0].train_hash[..12], rows.len()),
    );
}

#[test]
fn acceptance() {
    let mut r = Report { lines: Vec::new() };
    gradient_suite(&mut r);
    closed_form_attention(&mut r);
    geometry(&mut r);
    roi_align(&mut r);
    metrics(&mut r);
    losses(&mut r);
    training(&mut r);
    compare_harness(&mut r);
    r.lines.sort_by_key(|l| l.0);
    println!("\nsummary");
    for (_, _, line) in &r.lines {
        println!("{line}");
    }
    let failed: Vec<usize> = r.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
