//! End-to-end toy runs: synthesise, train, self-evaluate, and compare variants.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionVariant;
use crate::error::{Error, Result};
use crate::metrics::{format_table, map_report, EvalParams, EvalReport};

use super::coco::{detections_for, to_coco_detections, CocoDetection, CocoGt};
use super::config::RunConfig;
use super::model::{build_model, Model};
use super::synth::{dataset_hash, synth_dataset, Sample};
use super::train::{train_with, StepRecord};

/// Held-out samples come from a different stream of the same seed.
const EVAL_SALT: u64 = 0x6576_616c_7370_6c74;

pub fn variant_label(v: AttentionVariant) -> &'static str {
    match v {
        AttentionVariant::None => "Mask RCNN",
        AttentionVariant::Se => "Mask RCNN with SENet",
        AttentionVariant::Eca => "Mask RCNN with ECANet",
        AttentionVariant::Cbam => "Mask RCNN with CBAM",
    }
}

pub struct Splits {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

pub fn make_splits(cfg: &RunConfig, seed: u64) -> Result<Splits> {
    Ok(Splits {
        train: synth_dataset(&cfg.data, seed, cfg.train_images)?,
        eval: synth_dataset(&cfg.data, seed ^ EVAL_SALT, cfg.eval_images)?,
    })
}

/// Runs the detector over `samples` and scores it against their ground truth.
pub fn evaluate_model(model: &Model, samples: &[Sample], class_names: &[String]) -> Result<(EvalReport, Vec<CocoDetection>)> {
    let gt = CocoGt::from_samples(samples, class_names);
    let mut dets = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let found = model.detect(&s.image, model.cfg.score_threshold)?;
        dets.extend(to_coco_detections(i as u64, &found));
    }
    let report = map_report(&detections_for(&dets, &gt)?, &gt.records()?, &EvalParams::default())?;
    Ok((report, dets))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyRunSummary {
    pub attention: AttentionVariant,
    pub seed: u64,
    pub param_count: usize,
    pub train_hash: String,
    pub eval_hash: String,
    pub report: EvalReport,
}

pub struct ToyRun {
    pub model: Model,
    pub trace: Vec<StepRecord>,
    pub detections: Vec<CocoDetection>,
    pub summary: ToyRunSummary,
}

/// Trains one variant of `cfg` from `seed` and evaluates it on the held-out split.
pub fn run_toy(
    cfg: &RunConfig,
    attention: AttentionVariant,
    seed: u64,
    on_step: impl FnMut(&StepRecord),
) -> Result<ToyRun> {
    let splits = make_splits(cfg, seed)?;
    run_on(cfg, attention, seed, &splits, on_step)
}

fn run_on(
    cfg: &RunConfig,
    attention: AttentionVariant,
    seed: u64,
    splits: &Splits,
    on_step: impl FnMut(&StepRecord),
) -> Result<ToyRun> {
    let mut cfg = cfg.clone();
    cfg.model.attention = attention;
    cfg.train.seed = seed;
    cfg.validate()?;
    let mut model = build_model(&cfg.model, seed)?;
    let trace = train_with(&mut model, &splits.train, &cfg.train, on_step)?;
    let names: Vec<String> = cfg.data.classes.iter().map(|c| c.name.clone()).collect();
    let (report, detections) = evaluate_model(&model, &splits.eval, &names)?;
    let summary = ToyRunSummary {
        attention,
        seed,
        param_count: model.param_count(),
        train_hash: dataset_hash(&splits.train),
        eval_hash: dataset_hash(&splits.eval),
        report,
    };
    Ok(ToyRun { model, trace, detections, summary })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub runs: Vec<ToyRunSummary>,
}

impl Comparison {
    pub fn table(&self) -> String {
        let rows: Vec<(String, &EvalReport)> =
            self.runs.iter().map(|r| (variant_label(r.attention).to_string(), &r.report)).collect();
        format_table("Evaluation Results of Four Models", &rows)
    }
}

/// Trains and evaluates all four variants on identical data.
pub fn compare(cfg: &RunConfig, seed: u64, mut on_step: impl FnMut(AttentionVariant, &StepRecord)) -> Result<Comparison> {
    let mut runs: Vec<ToyRunSummary> = Vec::new();
    for v in AttentionVariant::ALL {
        // regenerate per variant so the hash check is a real check
        let splits = make_splits(cfg, seed)?;
        let run = run_on(cfg, v, seed, &splits, |r| on_step(v, r))?;
        if let Some(first) = runs.first() {
            if (first.train_hash.as_str(), first.eval_hash.as_str()) != (run.summary.train_hash.as_str(), run.summary.eval_hash.as_str()) {
                return Err(Error::Config(format!("dataset for {} differs from {}", v.name(), first.attention.name())));
            }
        }
        runs.push(run.summary);
    }
    Ok(Comparison { seed, runs })
}
