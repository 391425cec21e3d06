//! Synthetic data, detector assembly, training, inference and variant comparison.

pub mod augment;
pub mod coco;
pub mod config;
pub mod model;
pub mod run;
pub mod synth;
pub mod train;

pub use augment::{augment, Augment};
pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use model::{build_model, Checkpoint, InstanceDetection, Model};
pub use run::{compare, evaluate_model, run_toy, Comparison};
pub use synth::{dataset_hash, synth_dataset, Sample, SynthSpec};
pub use train::{train, StepRecord};
