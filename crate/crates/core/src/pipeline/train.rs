//! SGD with momentum and weight decay under a step learning-rate schedule.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

use super::augment::{augment, Augment};
use super::config::TrainConfig;
use super::model::Model;
use super::synth::Sample;

/// RNG stream used for batching, flips and anchor / ROI sampling.
const TRAIN_STREAM: u64 = 0x7261_696e;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_mask: f64,
    pub l_total: f64,
    pub lr: f64,
}

pub const TRACE_HEADER: &str = "step,epoch,l_cls,l_reg,l_mask,l_total,lr";

pub fn write_trace_csv(trace: &[StepRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in trace {
        writeln!(out, "{},{},{},{},{},{},{}", r.step, r.epoch, r.l_cls, r.l_reg, r.l_mask, r.l_total, r.lr)?;
    }
    Ok(())
}

/// Heavy-ball SGD state: `v ← μ·v + (∇ + λ·w)`, `w ← w − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn step(&mut self, params: &mut [crate::tensor::Tensor], grads: &[Option<Vec<f64>>], lr: f64, momentum: f64, weight_decay: f64) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            let w = p.data_mut();
            for i in 0..w.len() {
                let gi = g.as_ref().map_or(0.0, |g| g[i]) + weight_decay * w[i];
                v[i] = momentum * v[i] + gi;
                w[i] -= lr * v[i];
            }
        }
    }
}

/// Sum of the optional nodes, `None` when all are absent.
fn sum_opt(g: &mut Graph, terms: &[Option<Var>]) -> Result<Option<Var>> {
    let present: Vec<Var> = terms.iter().flatten().copied().collect();
    match present.len() {
        0 => Ok(None),
        1 => Ok(Some(present[0])),
        _ => g.add_all(&present).map(Some),
    }
}

/// Trains in place and returns the per-step trace.
pub fn train(model: &mut Model, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<StepRecord>> {
    train_with(model, data, cfg, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with(
    model: &mut Model,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut sgd = Sgd::default();
    let mut trace = Vec::with_capacity(cfg.total_steps());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let w = cfg.loss_weights;
    let bs = cfg.batch_size as f64;

    for step in 0..cfg.total_steps() {
        let lr = cfg.lr_at(step);
        let mut g = Graph::new();
        let b = model.store.bind(&mut g);
        let mut parts = Vec::new();
        let (mut l_cls, mut l_reg, mut l_mask) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let mut sample = data[order[cursor]].clone();
            cursor += 1;
            if cfg.hflip && rng.gen_bool(0.5) {
                sample = augment(&sample, Augment::HFlip)?;
            }
            let l = model.loss_nodes(&mut g, &b, &sample, &mut rng)?;
            let cls = sum_opt(&mut g, &[Some(l.rpn_cls), Some(l.head_cls)])?.expect("classification terms exist");
            let reg = sum_opt(&mut g, &[l.rpn_reg, l.head_reg])?;
            l_cls += g.value(cls).item() / bs;
            l_reg += reg.map_or(0.0, |r| g.value(r).item()) / bs;
            l_mask += l.mask.map_or(0.0, |m| g.value(m).item()) / bs;
            parts.push(g.scale(cls, w.cls / bs)?);
            if let Some(r) = reg {
                parts.push(g.scale(r, w.reg / bs)?);
            }
            if let Some(m) = l.mask {
                parts.push(g.scale(m, w.mask / bs)?);
            }
        }
        let total = g.add_all(&parts)?;
        let grads = g.backward(total)?;
        let mut flat = Vec::with_capacity(b.vars().len());
        for (i, &v) in b.vars().iter().enumerate() {
            let gt = grads.get(v).map(|t| t.data().to_vec());
            if let Some(gv) = &gt {
                if gv.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of {} at step {step}",
                        model.store.name(crate::params::ParamId(i))
                    )));
                }
            }
            flat.push(gt);
        }
        sgd.step(model.store.tensors_mut(), &flat, lr, cfg.momentum, cfg.weight_decay);
        let rec = StepRecord { step, epoch: cfg.epoch_of(step), l_cls, l_reg, l_mask, l_total: g.value(total).item(), lr };
        on_step(&rec);
        trace.push(rec);
    }
    Ok(trace)
}

/// Mean of `l_total` over steps `[from, to)`.
pub fn window_mean(trace: &[StepRecord], from: usize, to: usize) -> f64 {
    let w = &trace[from.min(trace.len())..to.min(trace.len())];
    w.iter().map(|r| r.l_total).sum::<f64>() / w.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionVariant;
    use crate::pipeline::config::ModelConfig;
    use crate::pipeline::model::build_model;
    use crate::pipeline::synth::{synth_dataset, SynthSpec};
    use crate::tensor::Tensor;

    #[test]
    fn sgd_matches_hand_update() {
        let mut p = vec![Tensor::new(&[2], vec![1.0, -2.0]).unwrap()];
        let mut sgd = Sgd::default();
        sgd.step(&mut p, &[Some(vec![0.5, 0.0])], 0.1, 0.9, 0.01);
        // v = g + λw = (0.51, −0.02)
        assert!((p[0].data()[0] - (1.0 - 0.051)).abs() < 1e-15);
        assert!((p[0].data()[1] - (-2.0 + 0.002)).abs() < 1e-15);
        sgd.step(&mut p, &[None], 0.1, 0.9, 0.0);
        assert!((p[0].data()[0] - (0.949 - 0.1 * 0.9 * 0.51)).abs() < 1e-15);
    }

    #[test]
    fn short_run_is_deterministic_and_logs_schedule() {
        let data = synth_dataset(&SynthSpec::default(), 2, 4).unwrap();
        let cfg = TrainConfig { epochs: 3, step_epochs: vec![1, 2], steps_per_epoch: 1, ..TrainConfig::default() };
        let run = || {
            let mut m = build_model(&ModelConfig::toy(AttentionVariant::Cbam), 5).unwrap();
            let t = train(&mut m, &data, &cfg).unwrap();
            (m.store, t)
        };
        let (s1, t1) = run();
        let (s2, t2) = run();
        assert_eq!(t1, t2);
        assert_eq!(s1, s2);
        let lrs: Vec<f64> = t1.iter().map(|r| r.lr).collect();
        assert_eq!(lrs, vec![0.002, 0.0002, 0.00002]);
        for r in &t1 {
            assert!((r.l_cls + r.l_reg + r.l_mask - r.l_total).abs() < 1e-12);
        }
        let mut csv = Vec::new();
        write_trace_csv(&t1, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next(), Some(TRACE_HEADER));
        assert_eq!(text.lines().count(), 4);
    }
}
