//! Finite-difference suites over the differentiable building blocks.
//!
//! Every suite builds a scalar `Σ wᵢ·yᵢ` (fixed random `w`) from a block's
//! output, treats inputs and parameters alike as probed leaves, and checks
//! central differences at `eps = 1e-4` against the tape gradient over many
//! seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{cbam, eca_block, se_block, AttentionConfig, AttentionParams, AttentionVariant};
use crate::backbone::{fpn_fuse, BottleneckParams, FpnParams};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_with, Coverage, GradCheckReport};
use crate::graph::{Graph, PoolMode, Var};
use crate::params::{Bound, ParamStore};
use crate::roi_align::{roi_align, RoiAlignConfig};
use crate::tensor::Tensor;

pub const SUITE_EPS: f64 = 1e-4;
pub const SUITE_TOL: f64 = 1e-3;
pub const SUITE_SEEDS: u64 = 20;
/// Elements probed per input tensor.
const PROBES_PER_INPUT: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteGroup {
    Attention,
    Backbone,
    RoiAlign,
    Losses,
}

impl SuiteGroup {
    pub const ALL: [SuiteGroup; 4] = [Self::Attention, Self::Backbone, Self::RoiAlign, Self::Losses];

    pub fn suites(self) -> &'static [&'static str] {
        match self {
            Self::Attention => &["cbam", "se", "eca"],
            Self::Backbone => &["bottleneck", "fpn"],
            Self::RoiAlign => &["roi_align_max", "roi_align_avg"],
            Self::Losses => &["loss_cls", "loss_reg", "loss_mask"],
        }
    }
}

impl std::str::FromStr for SuiteGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "backbone" => Ok(Self::Backbone),
            "roialign" => Ok(Self::RoiAlign),
            "losses" => Ok(Self::Losses),
            other => Err(Error::Config(format!("unknown gradient suite group {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteOutcome {
    pub name: String,
    pub seeds: u64,
    pub failures: usize,
    /// Draws rejected for sitting too close to a kink.
    pub redraws: u64,
    pub worst_seed: u64,
    pub worst: GradCheckReport,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `Σ w·y` with fixed weights drawn from `seed`.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(g.shape(y), -1.0, 1.0, &mut rng);
    let w = g.input(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Store tensors with non-zero biases so every parameter is exercised.
fn randomised(store: &ParamStore, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    store
        .tensors()
        .iter()
        .map(|t| if t.data().iter().all(|&v| v == 0.0) { uniform(t.shape(), -0.2, 0.2, rng) } else { t.clone() })
        .collect()
}

/// Smallest kink margin, in units of the probe step, a draw must keep.
pub const KINK_CLEARANCE: f64 = 10.0;
/// Draws attempted per seed before giving up on a kink-free point.
const MAX_DRAWS: u64 = 64;

type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    f: CaseFn,
    inputs: Vec<Tensor>,
    coverage: Coverage,
}

impl Case {
    fn strided(f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static, inputs: Vec<Tensor>) -> Self {
        Self { f: Box::new(f), inputs, coverage: Coverage::Strided(PROBES_PER_INPUT) }
    }

    fn margin(&self) -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.param(t.clone())).collect();
        (self.f)(&mut g, &vars)?;
        Ok(g.kink_margin())
    }
}

fn attention_case(variant: AttentionVariant, seed: u64, rng: &mut ChaCha8Rng) -> Result<Case> {
    let c = 8;
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(c, variant).with_reduction(4);
    let params = AttentionParams::init(&mut store, "attn", &cfg, rng)?;
    let mut inputs = vec![uniform(&[c, 5, 6], -1.0, 1.0, rng)];
    inputs.extend(randomised(&store, rng));
    Ok(Case::strided(
        move |g, v| {
            let b = Bound::from_vars(&v[1..]);
            let y = match &params {
                AttentionParams::Cbam(p) => cbam(g, &b, p, v[0])?,
                AttentionParams::Se(p) => se_block(g, &b, p, v[0])?,
                AttentionParams::Eca { kernel } => eca_block(g, &b, *kernel, v[0])?,
                AttentionParams::None => v[0],
            };
            project(g, y, seed)
        },
        inputs,
    ))
}

fn bottleneck_case(seed: u64, rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(16, AttentionVariant::Cbam).with_reduction(4);
    let block = BottleneckParams::init(&mut store, "block", 8, 16, 2, &cfg, rng)?;
    let mut inputs = vec![uniform(&[8, 6, 6], -1.0, 1.0, rng)];
    inputs.extend(randomised(&store, rng));
    Ok(Case::strided(
        move |g, v| {
            let b = Bound::from_vars(&v[1..]);
            let y = block.forward(g, &b, v[0])?;
            project(g, y, seed)
        },
        inputs,
    ))
}

fn fpn_case(seed: u64, rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut store = ParamStore::new();
    let widths = [4, 8, 12, 16];
    let fpn = FpnParams::init(&mut store, &widths, 6, rng);
    let mut inputs: Vec<Tensor> =
        widths.iter().zip([8, 4, 2, 1]).map(|(&w, s)| uniform(&[w, s, s], -1.0, 1.0, rng)).collect();
    inputs.extend(randomised(&store, rng));
    Ok(Case::strided(
        move |g, v| {
            let b = Bound::from_vars(&v[4..]);
            let pyr = fpn_fuse(g, &b, &fpn, &v[..4], true)?;
            let mut terms = Vec::new();
            for (i, l) in pyr.levels.iter().enumerate() {
                terms.push(project(g, l.map, seed + i as u64)?);
            }
            g.add_all(&terms)
        },
        inputs,
    ))
}

fn roi_align_case(mode: PoolMode, seed: u64, rng: &mut ChaCha8Rng) -> Result<Case> {
    let feature = uniform(&[3, 8, 8], -1.0, 1.0, rng);
    let stride = 4.0;
    let x1 = rng.gen_range(-4.0..20.0);
    let y1 = rng.gen_range(-4.0..20.0);
    let roi = BBox::from_corners(x1, y1, x1 + rng.gen_range(4.0..16.0), y1 + rng.gen_range(4.0..16.0))?;
    let cfg = RoiAlignConfig { output: 3, aggregation: mode };
    Ok(Case {
        f: Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = roi_align(g, v[0], stride, &roi, &cfg)?;
            project(g, y, seed)
        }),
        inputs: vec![feature],
        coverage: Coverage::All,
    })
}

fn loss_case(name: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = 24;
    let targets: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    match name {
        "loss_cls" => {
            let logits = uniform(&[n], -3.0, 3.0, rng);
            Ok(Case::strided(
                move |g, v| {
                    let p = g.sigmoid(v[0])?;
                    let s = g.binary_cross_entropy(p, &targets)?;
                    g.scale(s, 1.0 / n as f64)
                },
                vec![logits],
            ))
        }
        "loss_reg" => {
            let pred = uniform(&[4 * 6], -2.5, 2.5, rng);
            let t: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Ok(Case::strided(move |g, v| g.smooth_l1(v[0], &t), vec![pred]))
        }
        "loss_mask" => {
            let logits = uniform(&[36], -3.0, 3.0, rng);
            let t: Vec<f64> = (0..36).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
            Ok(Case::strided(
                move |g, v| {
                    let p = g.sigmoid(v[0])?;
                    crate::losses::mask_loss_node(g, p, &t)
                },
                vec![logits],
            ))
        }
        other => Err(Error::Config(format!("unknown loss suite {other:?}"))),
    }
}

fn build_case(name: &str, seed: u64, rng: &mut ChaCha8Rng) -> Result<Case> {
    match name {
        "cbam" => attention_case(AttentionVariant::Cbam, seed, rng),
        "se" => attention_case(AttentionVariant::Se, seed, rng),
        "eca" => attention_case(AttentionVariant::Eca, seed, rng),
        "bottleneck" => bottleneck_case(seed, rng),
        "fpn" => fpn_case(seed, rng),
        "roi_align_max" => roi_align_case(PoolMode::Max, seed, rng),
        "roi_align_avg" => roi_align_case(PoolMode::Avg, seed, rng),
        loss => loss_case(loss, rng),
    }
}

/// First draw for `seed` whose forward pass stays `KINK_CLEARANCE` probe
/// steps away from every ReLU hinge and max-window tie, with the number of
/// draws rejected before it.
fn draw_case(name: &str, seed: u64) -> Result<(Case, u64)> {
    for attempt in 0..MAX_DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        let case = build_case(name, seed, &mut rng)?;
        if case.margin()? >= KINK_CLEARANCE * SUITE_EPS {
            return Ok((case, attempt));
        }
    }
    Err(Error::Config(format!("{name}: no kink-free draw for seed {seed} in {MAX_DRAWS} attempts")))
}

/// One named case at one seed, with the number of rejected draws.
pub fn run_case(name: &str, seed: u64) -> Result<(GradCheckReport, u64)> {
    let (case, redraws) = draw_case(name, seed)?;
    let r = grad_check_with(&case.f, &case.inputs, SUITE_EPS, case.coverage)?;
    Ok((r, redraws))
}

/// Runs a named suite over seeds `0..seeds`.
pub fn run_suite(name: &str, seeds: u64) -> Result<SuiteOutcome> {
    let mut out: Option<SuiteOutcome> = None;
    for seed in 0..seeds {
        let (r, redraws) = run_case(name, seed)?;
        let failed = !r.passes(SUITE_TOL) as usize;
        match &mut out {
            None => {
                out = Some(SuiteOutcome { name: name.into(), seeds, failures: failed, redraws, worst_seed: seed, worst: r })
            }
            Some(o) => {
                o.failures += failed;
                o.redraws += redraws;
                if r.max_rel_err > o.worst.max_rel_err {
                    o.worst = r;
                    o.worst_seed = seed;
                }
            }
        }
    }
    out.ok_or_else(|| Error::Config("a suite needs at least one seed".into()))
}

pub fn run_group(group: SuiteGroup, seeds: u64) -> Result<Vec<SuiteOutcome>> {
    group.suites().iter().map(|s| run_suite(s, seeds)).collect()
}
