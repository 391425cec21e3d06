//! Attention-augmented Mask R-CNN at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`graph`], [`gradcheck`]: dense `f64` tensors, an operation
//!   tape with reverse-mode gradients, and a central-difference checker.
//! - [`attention`]: CBAM, SE and ECA gates.
//! - [`backbone`]: residual bottlenecks with optional attention, the staged
//!   backbone, and FPN fusion.
//! - [`boxes`]: IoU, delta encoding, anchors and NMS.
//! - [`roi_align`]: bilinear ROI feature extraction and level assignment.
//! - [`losses`]: anchor labelling and the classification / regression / mask losses.
//! - [`metrics`]: greedy matching, P-R curves, AP and mAP.
//! - [`pipeline`]: synthetic data, the toy detector, training, inference,
//!   and the comparison harness.

pub mod attention;
pub mod backbone;
pub mod boxes;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod roi_align;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
