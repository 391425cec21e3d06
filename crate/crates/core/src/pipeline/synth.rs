//! Deterministic synthetic instance-segmentation data.
//!
//! Each canvas holds a few coloured class shapes on a noisy dark background,
//! optionally with grey distractor shapes and occluding pairs. Masks are
//! rasterised at pixel centres and every GT box is the tight box of its
//! visible mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rectangle,
    Disk,
    Triangle,
    /// Hollow square; used for distractors.
    Ring,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeClass {
    pub name: String,
    pub shape: Shape,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub canvas: usize,
    pub classes: Vec<ShapeClass>,
    pub objects: (usize, usize),
    /// Side range of an object's bounding square, in pixels.
    pub size: (usize, usize),
    pub distractor_prob: f64,
    pub distractor_color: [f64; 3],
    /// Chance that an object is placed to overlap the previous one.
    pub occlusion_prob: f64,
    /// Uniform per-pixel noise amplitude.
    pub noise: f64,
    /// Objects left with less than this fraction of their drawn area are dropped.
    pub min_visible: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let class = |name: &str, shape, color| ShapeClass { name: name.into(), shape, color };
        Self {
            canvas: 64,
            classes: vec![
                class("rectangle", Shape::Rectangle, [0.9, 0.25, 0.2]),
                class("disk", Shape::Disk, [0.2, 0.85, 0.3]),
                class("triangle", Shape::Triangle, [0.25, 0.35, 0.95]),
            ],
            objects: (1, 3),
            size: (14, 28),
            distractor_prob: 0.3,
            distractor_color: [0.55, 0.55, 0.55],
            occlusion_prob: 0.2,
            noise: 0.05,
            min_visible: 0.4,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.canvas == 0 || self.canvas % 32 != 0 {
            return Err(Error::Config(format!("canvas {} must be a positive multiple of 32", self.canvas)));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("no object classes".into()));
        }
        if self.objects.0 == 0 || self.objects.0 > self.objects.1 {
            return Err(Error::Config(format!("object count range {:?}", self.objects)));
        }
        if self.size.0 < 4 || self.size.0 > self.size.1 || self.size.1 > self.canvas {
            return Err(Error::Config(format!("object size range {:?} for canvas {}", self.size, self.canvas)));
        }
        for p in [self.distractor_prob, self.occlusion_prob, self.min_visible] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.noise < 0.0 {
            return Err(Error::Config("negative noise".into()));
        }
        Ok(())
    }
}

/// One image with its instances. `classes` are 0-based foreground ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
    /// Row-major `H×W` binary masks, one per instance.
    pub masks: Vec<Vec<bool>>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Tight pixel box of a mask, `None` when empty.
pub fn mask_bbox(mask: &[bool], h: usize, w: usize) -> Option<BBox> {
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for i in 0..h {
        for j in 0..w {
            if mask[i * w + j] {
                x1 = x1.min(j);
                y1 = y1.min(i);
                x2 = x2.max(j + 1);
                y2 = y2.max(i + 1);
            }
        }
    }
    (x1 != usize::MAX).then(|| BBox::from_corners(x1 as f64, y1 as f64, x2 as f64, y2 as f64).expect("non-empty mask"))
}

/// Square placement: top-left corner and side.
#[derive(Clone, Copy, Debug)]
struct Placement {
    x: f64,
    y: f64,
    side: f64,
}

impl Placement {
    fn overlap_fraction(&self, o: &Placement) -> f64 {
        let iw = (self.x + self.side).min(o.x + o.side) - self.x.max(o.x);
        let ih = (self.y + self.side).min(o.y + o.side) - self.y.max(o.y);
        if iw <= 0.0 || ih <= 0.0 {
            return 0.0;
        }
        iw * ih / (self.side * self.side).min(o.side * o.side)
    }

    fn separated(&self, o: &Placement, gap: f64) -> bool {
        self.x + self.side + gap <= o.x
            || o.x + o.side + gap <= self.x
            || self.y + self.side + gap <= o.y
            || o.y + o.side + gap <= self.y
    }
}

/// Pixel-centre membership of `shape` drawn inside `p`.
fn covers(shape: Shape, p: &Placement, px: f64, py: f64) -> bool {
    let (u, v) = ((px - p.x) / p.side, (py - p.y) / p.side);
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return false;
    }
    match shape {
        Shape::Rectangle => (0.1..0.9).contains(&v),
        Shape::Disk => (u - 0.5).powi(2) + (v - 0.5).powi(2) < 0.25,
        Shape::Triangle => v >= 2.0 * (u - 0.5).abs(),
        Shape::Ring => !((0.25..0.75).contains(&u) && (0.25..0.75).contains(&v)),
    }
}

fn rasterise(shape: Shape, p: &Placement, n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = covers(shape, p, j as f64 + 0.5, i as f64 + 0.5);
        }
    }
    m
}

fn random_placement(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Placement {
    let side = rng.gen_range(spec.size.0..=spec.size.1) as f64;
    let max = spec.canvas as f64 - side;
    Placement { x: rng.gen_range(0.0..=max).floor(), y: rng.gen_range(0.0..=max).floor(), side }
}

/// Places a square overlapping `prev` by 20–60 % of the smaller square.
fn occluding_placement(spec: &SynthSpec, prev: &Placement, rng: &mut ChaCha8Rng) -> Option<Placement> {
    for _ in 0..50 {
        let mut p = random_placement(spec, rng);
        let dx = rng.gen_range(-1.0..1.0) * prev.side * 0.7;
        let dy = rng.gen_range(-1.0..1.0) * prev.side * 0.7;
        let max = spec.canvas as f64 - p.side;
        p.x = (prev.x + dx).clamp(0.0, max).floor();
        p.y = (prev.y + dy).clamp(0.0, max).floor();
        if (0.2..=0.6).contains(&prev.overlap_fraction(&p)) {
            return Some(p);
        }
    }
    None
}

/// Renders sample `index` of the stream identified by `seed`.
pub fn synth_sample(spec: &SynthSpec, seed: u64, index: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = spec.canvas;
    let target = rng.gen_range(spec.objects.0..=spec.objects.1);

    let mut placed: Vec<(Placement, usize)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < target && attempts < 200 {
        attempts += 1;
        let class = rng.gen_range(0..spec.classes.len());
        let occlude = !placed.is_empty() && rng.gen_bool(spec.occlusion_prob);
        let p = if occlude {
            match occluding_placement(spec, &placed.last().expect("non-empty").0, &mut rng) {
                Some(p) => p,
                None => continue,
            }
        } else {
            let p = random_placement(spec, &mut rng);
            if !placed.iter().all(|(q, _)| p.separated(q, 1.0)) {
                continue;
            }
            p
        };
        placed.push((p, class));
    }

    let mut distractor = None;
    if rng.gen_bool(spec.distractor_prob) {
        for _ in 0..50 {
            let p = random_placement(spec, &mut rng);
            if placed.iter().all(|(q, _)| p.separated(q, 1.0)) {
                distractor = Some(p);
                break;
            }
        }
    }

    // paint: background noise, distractor, then objects in order (later on top)
    let mut image = vec![0.0; 3 * n * n];
    for v in image.iter_mut() {
        *v = 0.1 + rng.gen_range(-1.0..=1.0) * spec.noise;
    }
    let paint = |image: &mut [f64], mask: &[bool], color: [f64; 3]| {
        for (k, &on) in mask.iter().enumerate() {
            if on {
                for c in 0..3 {
                    image[c * n * n + k] = color[c];
                }
            }
        }
    };
    if let Some(p) = distractor {
        paint(&mut image, &rasterise(Shape::Ring, &p, n), spec.distractor_color);
    }
    let drawn: Vec<Vec<bool>> = placed.iter().map(|(p, c)| rasterise(spec.classes[*c].shape, p, n)).collect();
    let mut visible = drawn.clone();
    for (k, ((_, c), mask)) in placed.iter().zip(&drawn).enumerate() {
        paint(&mut image, mask, spec.classes[*c].color);
        for below in visible.iter_mut().take(k) {
            for (b, &m) in below.iter_mut().zip(mask) {
                *b &= !m;
            }
        }
    }
    // noise on top of shapes too, so colour is not a perfect giveaway of the mask
    for v in image.iter_mut() {
        *v += rng.gen_range(-1.0..=1.0) * spec.noise;
    }

    let mut sample = Sample { image: Tensor::new(&[3, n, n], image)?, boxes: vec![], classes: vec![], masks: vec![] };
    for ((_, c), (full, vis)) in placed.iter().zip(drawn.iter().zip(visible)) {
        let full_area = full.iter().filter(|&&b| b).count();
        let vis_area = vis.iter().filter(|&&b| b).count();
        if full_area == 0 || (vis_area as f64) < spec.min_visible * full_area as f64 {
            continue;
        }
        let bbox = mask_bbox(&vis, n, n).expect("visible area is positive");
        sample.boxes.push(bbox);
        sample.classes.push(*c);
        sample.masks.push(vis);
    }
    Ok(sample)
}

/// `n` samples, fully determined by `(spec, seed)`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be ≥ 1".into()));
    }
    (0..n as u64).map(|i| synth_sample(spec, seed, i)).collect()
}

/// SHA-256 over the exact bytes of every image, box, class id and mask.
pub fn dataset_hash(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        for &d in s.image.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in s.image.data() {
            h.update(v.to_le_bytes());
        }
        h.update((s.boxes.len() as u64).to_le_bytes());
        for (b, (&c, m)) in s.boxes.iter().zip(s.classes.iter().zip(&s.masks)) {
            for v in b.corners() {
                h.update(v.to_le_bytes());
            }
            h.update((c as u64).to_le_bytes());
            h.update(m.iter().map(|&x| x as u8).collect::<Vec<u8>>());
        }
    }
    hex::encode(h.finalize())
}
