//! Residual backbone with attention-augmented bottlenecks, and FPN fusion.
//!
//! The backbone is a ResNet-style stem (7×7 stride-2 conv, 3×3 stride-2 max
//! pool) followed by four stages of bottlenecks producing C2..C5 at strides
//! 4, 8, 16, 32. Each bottleneck runs `1×1 reduce → 3×3 → 1×1 expand`, passes
//! the branch output through its attention gate, adds the skip path and
//! applies ReLU. There is no normalisation layer.
//!
//! FPN fusion: `P5 = lat(C5)`, `P_i = lat(C_i) + up2(P_{i+1})`, each P then
//! smoothed by a 3×3 conv; P6 is a stride-2 subsample of P5.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionParams, AttentionVariant};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{add_conv, Bound, ParamId, ParamStore, LINEAR_GAIN, RELU_GAIN};

/// Bottleneck counts and output widths of the four stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub blocks: Vec<usize>,
    pub widths: Vec<usize>,
    pub stem_width: usize,
}

/// Internal width of a bottleneck relative to its output width.
pub const EXPANSION: usize = 4;

impl StageConfig {
    /// ResNet-50 layout.
    pub fn reference() -> Self {
        Self { blocks: vec![3, 4, 6, 3], widths: vec![256, 512, 1024, 2048], stem_width: 64 }
    }

    pub fn toy() -> Self {
        Self { blocks: vec![1, 1, 1, 1], widths: vec![8, 16, 32, 64], stem_width: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != 4 || self.widths.len() != 4 {
            return Err(Error::Config("backbone needs exactly 4 stages".into()));
        }
        if self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config("every stage needs at least one bottleneck".into()));
        }
        if self.widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("stage widths {:?} must strictly increase", self.widths)));
        }
        if self.widths.iter().any(|w| w % EXPANSION != 0) {
            return Err(Error::Config(format!("stage widths {:?} must be multiples of {EXPANSION}", self.widths)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (weight, bias) = add_conv(store, name, cin, cout, k, true, gain, rng);
        Self { weight, bias, stride, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, b[self.weight], self.bias.map(|p| b[p]), self.stride, self.pad)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BottleneckParams {
    pub reduce: ConvParams,
    pub conv3x3: ConvParams,
    pub expand: ConvParams,
    pub projection: Option<ConvParams>,
    pub attention: AttentionParams,
}

impl BottleneckParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        attention: &AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mid = cout / EXPANSION;
        let reduce = ConvParams::init(store, &format!("{name}.conv1"), cin, mid, 1, 1, RELU_GAIN, rng);
        let conv3x3 = ConvParams::init(store, &format!("{name}.conv2"), mid, mid, 3, stride, RELU_GAIN, rng);
        let expand = ConvParams::init(store, &format!("{name}.conv3"), mid, cout, 1, 1, LINEAR_GAIN, rng);
        let projection = (stride > 1 || cin != cout)
            .then(|| ConvParams::init(store, &format!("{name}.proj"), cin, cout, 1, stride, LINEAR_GAIN, rng));
        let attn_cfg = AttentionConfig { channels: cout, ..*attention };
        let attention = AttentionParams::init(store, &format!("{name}.attn"), &attn_cfg, rng)?;
        Ok(Self { reduce, conv3x3, expand, projection, attention })
    }

    /// `ReLU(skip(x) + attn(branch(x)))`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let h = self.reduce.forward(g, b, x)?;
        let h = g.relu(h)?;
        let h = self.conv3x3.forward(g, b, h)?;
        let h = g.relu(h)?;
        let h = self.expand.forward(g, b, h)?;
        let h = self.attention.forward(g, b, h)?;
        let skip = match &self.projection {
            Some(p) => p.forward(g, b, x)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        g.relu(sum)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneParams {
    pub stem: ConvParams,
    pub stages: Vec<Vec<BottleneckParams>>,
}

impl BackboneParams {
    pub fn init(
        store: &mut ParamStore,
        stages: &StageConfig,
        attention: &AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        stages.validate()?;
        let stem = ConvParams::init(store, "stem", 3, stages.stem_width, 7, 2, RELU_GAIN, rng);
        let mut cin = stages.stem_width;
        let mut all = Vec::new();
        for (s, (&n, &width)) in stages.blocks.iter().zip(&stages.widths).enumerate() {
            let mut blocks = Vec::new();
            for i in 0..n {
                let stride = if i == 0 && s > 0 { 2 } else { 1 };
                let name = format!("layer{}.{}", s + 2, i);
                blocks.push(BottleneckParams::init(store, &name, cin, width, stride, attention, rng)?);
                cin = width;
            }
            all.push(blocks);
        }
        Ok(Self { stem, stages: all })
    }

    /// Returns `[C2, C3, C4, C5]`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, image: Var) -> Result<Vec<Var>> {
        let (c, h, w) = g.value(image).chw()?;
        if c != 3 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!("backbone input must be 3×H×W with H, W divisible by 32, got {c}×{h}×{w}")));
        }
        let x = self.stem.forward(g, b, image)?;
        let x = g.relu(x)?;
        let mut x = g.max_pool2d(x, 3, 2, 1)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(g, b, x)?;
            }
            outs.push(x);
        }
        Ok(outs)
    }

    pub fn variant(&self) -> AttentionVariant {
        self.stages[0][0].attention.variant()
    }
}

/// One pyramid level: map handle, level number `i` and stride `2^i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Level {
    pub level: usize,
    pub map: Var,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub levels: Vec<Level>,
}

impl PyramidFeatures {
    pub fn get(&self, level: usize) -> Option<&Level> {
        self.levels.iter().find(|l| l.level == level)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FpnParams {
    pub dim: usize,
    pub laterals: Vec<ConvParams>,
    pub smooth: Vec<ConvParams>,
}

impl FpnParams {
    pub fn init(store: &mut ParamStore, in_widths: &[usize], dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let laterals = in_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| ConvParams::init(store, &format!("fpn.lateral{}", i + 2), w, dim, 1, 1, LINEAR_GAIN, rng))
            .collect();
        let smooth = (0..in_widths.len())
            .map(|i| ConvParams::init(store, &format!("fpn.smooth{}", i + 2), dim, dim, 3, 1, LINEAR_GAIN, rng))
            .collect();
        Self { dim, laterals, smooth }
    }
}

/// Fused maps before the 3×3 smoothing, P2..P5.
pub fn fpn_top_down(g: &mut Graph, b: &Bound, p: &FpnParams, c: &[Var]) -> Result<Vec<Var>> {
    if c.len() != p.laterals.len() {
        return Err(Error::Shape(format!("{} backbone maps for {} laterals", c.len(), p.laterals.len())));
    }
    let n = c.len();
    let mut fused = vec![None; n];
    let mut above = p.laterals[n - 1].forward(g, b, c[n - 1])?;
    fused[n - 1] = Some(above);
    for i in (0..n - 1).rev() {
        let lat = p.laterals[i].forward(g, b, c[i])?;
        let up = g.upsample_nearest(above, 2)?;
        above = g.add(lat, up)?;
        fused[i] = Some(above);
    }
    Ok(fused.into_iter().map(|v| v.expect("filled")).collect())
}

/// P2..P5 (and P6 when requested) with their strides.
pub fn fpn_fuse(g: &mut Graph, b: &Bound, p: &FpnParams, c: &[Var], with_p6: bool) -> Result<PyramidFeatures> {
    let fused = fpn_top_down(g, b, p, c)?;
    let mut levels = Vec::with_capacity(fused.len() + 1);
    for (i, (&m, smooth)) in fused.iter().zip(&p.smooth).enumerate() {
        let level = i + 2;
        levels.push(Level { level, map: smooth.forward(g, b, m)?, stride: 1 << level });
    }
    if with_p6 {
        let p5 = levels.last().expect("four levels").map;
        let p6 = g.max_pool2d(p5, 1, 2, 0)?;
        levels.push(Level { level: 6, map: p6, stride: 64 });
    }
    Ok(PyramidFeatures { levels })
}
