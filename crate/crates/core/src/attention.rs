//! Channel and spatial attention gates: CBAM and the SE / ECA baselines.
//!
//! Every block maps `C×H×W → C×H×W` by multiplying its input with sigmoid
//! gates, so all multipliers lie strictly inside (0, 1). The CBAM channel
//! gate runs one MLP `C → C/r → C` (ReLU hidden layer) over both the
//! average- and max-pooled descriptors and adds the results before the
//! sigmoid. Its spatial gate is a 7×7 convolution over the concatenated
//! channel-average and channel-max maps.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, PoolMode, Var};
use crate::params::{add_conv, add_linear, uniform_fan_in, Bound, ParamId, ParamStore, LINEAR_GAIN, RELU_GAIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    None,
    Se,
    Eca,
    Cbam,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [Self::None, Self::Se, Self::Eca, Self::Cbam];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Se => "se",
            Self::Eca => "eca",
            Self::Cbam => "cbam",
        }
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "se" => Ok(Self::Se),
            "eca" => Ok(Self::Eca),
            "cbam" => Ok(Self::Cbam),
            other => Err(Error::Config(format!("unknown attention variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EcaKernel {
    Adaptive,
    Fixed(usize),
}

/// `k` = nearest odd integer to `|log2(C)/2 + 1/2|`, at least 3.
pub fn eca_adaptive_kernel(channels: usize) -> usize {
    let t = ((channels as f64).log2() / 2.0 + 0.5).abs();
    let odd = 2.0 * ((t - 1.0) / 2.0).round() + 1.0;
    (odd.max(3.0)) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub channels: usize,
    pub reduction: usize,
    pub variant: AttentionVariant,
    pub eca_kernel: EcaKernel,
}

impl AttentionConfig {
    pub fn new(channels: usize, variant: AttentionVariant) -> Self {
        Self { channels, reduction: 16, variant, eca_kernel: EcaKernel::Adaptive }
    }

    pub fn with_reduction(mut self, r: usize) -> Self {
        self.reduction = r;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("attention over zero channels".into()));
        }
        if matches!(self.variant, AttentionVariant::Se | AttentionVariant::Cbam)
            && (self.reduction == 0 || self.channels % self.reduction != 0)
        {
            return Err(Error::Config(format!(
                "channels {} not divisible by reduction ratio {}",
                self.channels, self.reduction
            )));
        }
        if let EcaKernel::Fixed(k) = self.eca_kernel {
            if k % 2 == 0 {
                return Err(Error::Config(format!("ECA kernel size {k} must be odd")));
            }
        }
        Ok(())
    }

    pub fn eca_kernel_size(&self) -> usize {
        match self.eca_kernel {
            EcaKernel::Adaptive => eca_adaptive_kernel(self.channels),
            EcaKernel::Fixed(k) => k,
        }
    }
}

/// Two-layer perceptron `C → C/r → C` with ReLU between.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpParams {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = channels / reduction;
        let (w1, b1) = add_linear(store, &format!("{name}.fc1"), channels, hidden, RELU_GAIN, rng);
        let (w2, b2) = add_linear(store, &format!("{name}.fc2"), hidden, channels, LINEAR_GAIN, rng);
        Self { w1, b1, w2, b2 }
    }

    /// `C×1×1 → 1×C` pre-activation.
    fn forward(&self, g: &mut Graph, b: &Bound, desc: Var) -> Result<Var> {
        let c = g.shape(desc)[0];
        let row = g.reshape(desc, &[1, c])?;
        let h = g.linear(row, b[self.w1], Some(b[self.b1]))?;
        let h = g.relu(h)?;
        g.linear(h, b[self.w2], Some(b[self.b2]))
    }
}

/// 7×7 convolution from the 2-channel [avg, max] map to one gate channel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpatialParams {
    pub conv: ParamId,
}

pub const SPATIAL_KERNEL: usize = 7;

impl SpatialParams {
    pub fn init(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng) -> Self {
        let (conv, _) = add_conv(store, &format!("{name}.conv7"), 2, 1, SPATIAL_KERNEL, false, LINEAR_GAIN, rng);
        Self { conv }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CbamParams {
    pub mlp: MlpParams,
    pub spatial: SpatialParams,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum AttentionParams {
    None,
    Se(MlpParams),
    Eca { kernel: ParamId },
    Cbam(CbamParams),
}

impl AttentionParams {
    pub fn init(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.variant {
            AttentionVariant::None => Self::None,
            AttentionVariant::Se => Self::Se(MlpParams::init(store, &format!("{name}.se"), cfg.channels, cfg.reduction, rng)),
            AttentionVariant::Eca => {
                let k = cfg.eca_kernel_size();
                let kernel = store.add(format!("{name}.eca.weight"), uniform_fan_in(&[k], k, LINEAR_GAIN, rng));
                Self::Eca { kernel }
            }
            AttentionVariant::Cbam => Self::Cbam(CbamParams {
                mlp: MlpParams::init(store, &format!("{name}.cam"), cfg.channels, cfg.reduction, rng),
                spatial: SpatialParams::init(store, &format!("{name}.sam"), rng),
            }),
        })
    }

    pub fn variant(&self) -> AttentionVariant {
        match self {
            Self::None => AttentionVariant::None,
            Self::Se(_) => AttentionVariant::Se,
            Self::Eca { .. } => AttentionVariant::Eca,
            Self::Cbam(_) => AttentionVariant::Cbam,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        match self {
            Self::None => Ok(x),
            Self::Se(mlp) => se_block(g, b, mlp, x),
            Self::Eca { kernel } => eca_block(g, b, *kernel, x),
            Self::Cbam(p) => cbam(g, b, p, x),
        }
    }
}

/// `σ(MLP(AP(F)) + MLP(MP(F)))`, shaped `C×1×1`.
pub fn channel_weights(g: &mut Graph, b: &Bound, mlp: &MlpParams, x: Var) -> Result<Var> {
    let c = g.value(x).chw()?.0;
    let avg = g.spatial_pool(x, PoolMode::Avg)?;
    let max = g.spatial_pool(x, PoolMode::Max)?;
    let za = mlp.forward(g, b, avg)?;
    let zm = mlp.forward(g, b, max)?;
    let z = g.add(za, zm)?;
    let z = g.reshape(z, &[c, 1, 1])?;
    g.sigmoid(z)
}

pub fn channel_attention(g: &mut Graph, b: &Bound, mlp: &MlpParams, x: Var) -> Result<Var> {
    let w = channel_weights(g, b, mlp, x)?;
    g.scale_channels(w, x)
}

/// `σ(Conv7×7([AP_c(F′), MP_c(F′)]))`, shaped `1×H×W`.
pub fn spatial_weights(g: &mut Graph, b: &Bound, p: &SpatialParams, x: Var) -> Result<Var> {
    let avg = g.channel_pool(x, PoolMode::Avg)?;
    let max = g.channel_pool(x, PoolMode::Max)?;
    let stacked = g.concat(&[avg, max])?;
    let z = g.conv2d(stacked, b[p.conv], None, 1, SPATIAL_KERNEL / 2)?;
    g.sigmoid(z)
}

pub fn spatial_attention(g: &mut Graph, b: &Bound, p: &SpatialParams, x: Var) -> Result<Var> {
    let w = spatial_weights(g, b, p, x)?;
    g.scale_spatial(w, x)
}

/// Channel attention followed by spatial attention.
pub fn cbam(g: &mut Graph, b: &Bound, p: &CbamParams, x: Var) -> Result<Var> {
    let refined = channel_attention(g, b, &p.mlp, x)?;
    spatial_attention(g, b, &p.spatial, refined)
}

/// Squeeze (global average) and excitation (MLP + sigmoid), then channel scale.
pub fn se_block(g: &mut Graph, b: &Bound, mlp: &MlpParams, x: Var) -> Result<Var> {
    let c = g.value(x).chw()?.0;
    let squeeze = g.spatial_pool(x, PoolMode::Avg)?;
    let z = mlp.forward(g, b, squeeze)?;
    let z = g.reshape(z, &[c, 1, 1])?;
    let w = g.sigmoid(z)?;
    g.scale_channels(w, x)
}

/// Global average, 1-D conv across channels, sigmoid, channel scale.
pub fn eca_block(g: &mut Graph, b: &Bound, kernel: ParamId, x: Var) -> Result<Var> {
    let squeeze = g.spatial_pool(x, PoolMode::Avg)?;
    let z = g.channel_conv1d(squeeze, b[kernel])?;
    let w = g.sigmoid(z)?;
    g.scale_channels(w, x)
}
