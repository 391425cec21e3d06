//! Model, optimiser and run configuration.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionVariant, EcaKernel};
use crate::backbone::StageConfig;
use crate::boxes::AnchorConfig;
use crate::error::{Error, Result};
use crate::losses::{LabelConfig, LossWeights};
use crate::roi_align::RoiAlignConfig;

use super::synth::SynthSpec;

/// Environment variable that overrides the run seed.
pub const SEED_ENV: &str = "ATTNMASK_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub pre_nms: usize,
    pub post_nms: usize,
    pub nms_iou: f64,
    /// Proposals fed to the ROI heads per image while training.
    pub train_post_nms: usize,
    /// Proposals smaller than this side (pixels) are dropped.
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { pre_nms: 1000, post_nms: 100, nms_iou: 0.7, train_post_nms: 64, min_size: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiSamplingConfig {
    pub batch_size: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    /// Cap on foreground ROIs sent through the mask head per image.
    pub max_mask_rois: usize,
}

impl Default for RoiSamplingConfig {
    fn default() -> Self {
        Self { batch_size: 32, fg_fraction: 0.25, fg_iou: 0.5, max_mask_rois: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub attention: AttentionVariant,
    pub reduction: usize,
    pub eca_kernel: EcaKernel,
    pub stages: StageConfig,
    pub fpn_dim: usize,
    pub with_p6: bool,
    pub anchors: AnchorConfig,
    pub box_roi: RoiAlignConfig,
    pub mask_roi: RoiAlignConfig,
    pub box_head_width: usize,
    pub mask_head_width: usize,
    /// Foreground classes; the box classifier adds one background logit.
    pub num_classes: usize,
    /// ROI side that maps to level 4.
    pub canonical_roi: f64,
    pub rpn_labels: LabelConfig,
    pub proposals: ProposalConfig,
    pub roi_sampling: RoiSamplingConfig,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub mask_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(AttentionVariant::Cbam)
    }
}

impl ModelConfig {
    /// Small detector for 64×64 synthetic canvases.
    pub fn toy(attention: AttentionVariant) -> Self {
        Self {
            attention,
            reduction: 4,
            eca_kernel: EcaKernel::Adaptive,
            stages: StageConfig::toy(),
            fpn_dim: 32,
            with_p6: true,
            anchors: AnchorConfig { ratios: vec![0.5, 1.0, 2.0], scales: vec![8.0, 16.0, 32.0, 64.0, 128.0] },
            box_roi: RoiAlignConfig::boxes(),
            mask_roi: RoiAlignConfig::masks(),
            box_head_width: 128,
            mask_head_width: 16,
            num_classes: 3,
            canonical_roi: 56.0,
            rpn_labels: LabelConfig::default(),
            proposals: ProposalConfig::default(),
            roi_sampling: RoiSamplingConfig::default(),
            nms_iou: 0.5,
            score_threshold: 0.5,
            mask_threshold: 0.5,
        }
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig { channels: self.stages.widths[0], reduction: self.reduction, variant: self.attention, eca_kernel: self.eca_kernel }
    }

    pub fn validate(&self) -> Result<()> {
        self.stages.validate()?;
        self.anchors.validate()?;
        for &w in &self.stages.widths {
            AttentionConfig { channels: w, ..self.attention_config() }.validate()?;
        }
        if self.num_classes == 0 {
            return Err(Error::Config("need at least one foreground class".into()));
        }
        if self.fpn_dim == 0 || self.box_head_width == 0 || self.mask_head_width == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        let levels = if self.with_p6 { 5 } else { 4 };
        if self.anchors.scales.len() < levels {
            return Err(Error::Config(format!("{} anchor scales for {levels} pyramid levels", self.anchors.scales.len())));
        }
        if self.box_roi.output == 0 || self.mask_roi.output == 0 {
            return Err(Error::Config("ROI Align resolution must be positive".into()));
        }
        for (name, v) in [("nms_iou", self.nms_iou), ("score_threshold", self.score_threshold), ("mask_threshold", self.mask_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_epochs: Vec<usize>,
    pub step_factor: f64,
    pub seed: u64,
    pub steps_per_epoch: usize,
    pub loss_weights: LossWeights,
    /// Random horizontal flips of training samples.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 26,
            batch_size: 2,
            step_epochs: vec![16, 22],
            step_factor: 0.1,
            seed: 0,
            steps_per_epoch: 12,
            loss_weights: LossWeights::default(),
            hflip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight decay ≥ 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("epochs, batch size and steps per epoch must be positive".into()));
        }
        if self.step_epochs.iter().any(|&e| e >= self.epochs) || self.step_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "step epochs {:?} must increase and stay below {} epochs",
                self.step_epochs, self.epochs
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn epoch_of(&self, step: usize) -> usize {
        step / self.steps_per_epoch
    }

    /// StepLR: the base rate multiplied by `factor` once per milestone
    /// reached by this step's epoch, applied one multiplication at a time.
    pub fn lr_at(&self, step: usize) -> f64 {
        let epoch = self.epoch_of(step);
        self.step_epochs.iter().filter(|&&e| epoch >= e).fold(self.lr, |lr, _| lr * self.step_factor)
    }
}

/// Classification and regression terms weighted up for the short toy schedule.
pub const TOY_LOSS_WEIGHTS: LossWeights = LossWeights { cls: 3.0, reg: 3.0, mask: 1.0 };

/// Everything a toy run needs: data, model and optimiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_images: usize,
    pub eval_images: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: SynthSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig { loss_weights: TOY_LOSS_WEIGHTS, ..TrainConfig::default() },
            train_images: 48,
            eval_images: 24,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.data.classes.len() != self.model.num_classes {
            return Err(Error::Config(format!(
                "data has {} classes, model expects {}",
                self.data.classes.len(),
                self.model.num_classes
            )));
        }
        if self.train_images == 0 || self.eval_images == 0 {
            return Err(Error::Config("train and eval splits must be non-empty".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `ATTNMASK_SEED` when set and parseable, else `fallback`.
pub fn resolve_seed(fallback: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_optimiser_defaults() {
        let t = TrainConfig::default();
        assert_eq!((t.lr, t.momentum, t.weight_decay), (0.002, 0.9, 0.0001));
        assert_eq!((t.epochs, t.batch_size, t.step_epochs.clone(), t.step_factor), (26, 2, vec![16, 22], 0.1));
        t.validate().unwrap();
    }

    #[test]
    fn step_lr_boundaries() {
        let t = TrainConfig { steps_per_epoch: 10, ..TrainConfig::default() };
        assert_eq!(t.lr_at(0), 0.002);
        assert_eq!(t.lr_at(159), 0.002);
        assert_eq!(t.lr_at(160), 0.0002);
        assert_eq!(t.lr_at(219), 0.0002);
        assert_eq!(t.lr_at(220), 0.00002);
        assert_eq!(t.lr_at(259), 0.00002);
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { step_epochs: vec![16, 26], ..TrainConfig::default() }.validate().is_err());
        assert!(ModelConfig { num_classes: 0, ..ModelConfig::default() }.validate().is_err());
        ModelConfig::default().validate().unwrap();
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"steps_per_epoch": 3}, "train_images": 6}"#).unwrap();
        assert_eq!(cfg.train.steps_per_epoch, 3);
        assert_eq!(cfg.train.lr, 0.002);
        assert_eq!(cfg.train_images, 6);
        assert!(RunConfig::from_json("{\"train\": ").is_err());
    }
}
