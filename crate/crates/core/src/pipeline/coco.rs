//! COCO-style JSON for ground truth and detections.
//!
//! Ground truth: `{images: [{id, width, height}], annotations: [{id,
//! image_id, category_id, bbox: [x, y, w, h], area, iscrowd}], categories:
//! [{id, name}]}`. Detections: `[{image_id, category_id, bbox, score}]`.
//! Boxes use the top-left pixel convention.

use std::collections::BTreeSet;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::metrics::{Detection, GtRecord};

use super::model::InstanceDetection;
use super::synth::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: u64,
    pub height: u64,
}

fn crowd_flag<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    match Value::deserialize(d)? {
        Value::Bool(b) => Ok(b),
        Value::Number(n) if n.as_u64() == Some(0) => Ok(false),
        Value::Number(n) if n.as_u64() == Some(1) => Ok(true),
        other => Err(serde::de::Error::custom(format!("iscrowd must be 0, 1 or a boolean, got {other}"))),
    }
}

fn crowd_out<S: serde::Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(*v as u8)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default, deserialize_with = "crowd_flag", serialize_with = "crowd_out")]
    pub iscrowd: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoGt {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoDetection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

fn records<T: for<'de> Deserialize<'de>>(items: &Value, what: &str) -> Result<Vec<T>> {
    let arr = items.as_array().ok_or_else(|| Error::Record(format!("`{what}` must be an array")))?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            T::deserialize(v).map_err(|e| {
                let id = v.get("id").map(|id| format!(" (id {id})")).unwrap_or_default();
                Error::Record(format!("{what}[{i}]{id}: {e}"))
            })
        })
        .collect()
}

fn checked_box(b: [f64; 4], ctx: impl Fn() -> String) -> Result<BBox> {
    BBox::from_coco(b).map_err(|e| Error::Record(format!("{}: {e}", ctx())))
}

impl CocoGt {
    pub fn parse(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Record(format!("ground truth is not valid JSON: {e}")))?;
        let field = |name: &str| v.get(name).ok_or_else(|| Error::Record(format!("ground truth lacks `{name}`")));
        let gt = Self {
            images: records(field("images")?, "images")?,
            annotations: records(field("annotations")?, "annotations")?,
            categories: records(field("categories")?, "categories")?,
        };
        gt.validate()?;
        Ok(gt)
    }

    fn validate(&self) -> Result<()> {
        let images: BTreeSet<u64> = self.images.iter().map(|i| i.id).collect();
        let cats = self.category_ids();
        for (i, a) in self.annotations.iter().enumerate() {
            let ctx = || format!("annotations[{i}] (id {})", a.id);
            if !images.contains(&a.image_id) {
                return Err(Error::Record(format!("{}: unknown image id {}", ctx(), a.image_id)));
            }
            if !cats.contains(&a.category_id) {
                return Err(Error::Record(format!("{}: unknown category id {}", ctx(), a.category_id)));
            }
            checked_box(a.bbox, ctx)?;
        }
        Ok(())
    }

    pub fn category_ids(&self) -> BTreeSet<u64> {
        self.categories.iter().map(|c| c.id).collect()
    }

    pub fn records(&self) -> Result<Vec<GtRecord>> {
        self.annotations
            .iter()
            .enumerate()
            .map(|(i, a)| {
                Ok(GtRecord {
                    image_id: a.image_id,
                    category_id: a.category_id,
                    bbox: checked_box(a.bbox, || format!("annotations[{i}] (id {})", a.id))?,
                    iscrowd: a.iscrowd,
                })
            })
            .collect()
    }

    /// Ground truth for synthetic samples; image ids are sample indices,
    /// category ids are class ids plus one.
    pub fn from_samples(samples: &[Sample], class_names: &[String]) -> Self {
        let mut gt = Self {
            categories: class_names
                .iter()
                .enumerate()
                .map(|(i, n)| CocoCategory { id: i as u64 + 1, name: n.clone() })
                .collect(),
            ..Self::default()
        };
        for (img, s) in samples.iter().enumerate() {
            gt.images.push(CocoImage { id: img as u64, width: s.width() as u64, height: s.height() as u64 });
            for ((b, &c), m) in s.boxes.iter().zip(&s.classes).zip(&s.masks) {
                gt.annotations.push(CocoAnnotation {
                    id: gt.annotations.len() as u64 + 1,
                    image_id: img as u64,
                    category_id: c as u64 + 1,
                    bbox: b.to_coco(),
                    area: m.iter().filter(|&&x| x).count() as f64,
                    iscrowd: false,
                });
            }
        }
        gt
    }
}

pub fn parse_detections(text: &str) -> Result<Vec<CocoDetection>> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Record(format!("detections are not valid JSON: {e}")))?;
    records(&v, "detections")
}

/// Validates detections against the ground truth's images and categories.
pub fn detections_for(dets: &[CocoDetection], gt: &CocoGt) -> Result<Vec<Detection>> {
    let images: BTreeSet<u64> = gt.images.iter().map(|i| i.id).collect();
    let cats = gt.category_ids();
    dets.iter()
        .enumerate()
        .map(|(i, d)| {
            let ctx = || format!("detections[{i}] (image {}, category {})", d.image_id, d.category_id);
            if !cats.contains(&d.category_id) {
                return Err(Error::Record(format!("{}: unknown category id {}", ctx(), d.category_id)));
            }
            if !images.contains(&d.image_id) {
                return Err(Error::Record(format!("{}: unknown image id {}", ctx(), d.image_id)));
            }
            if !d.score.is_finite() {
                return Err(Error::Record(format!("{}: non-finite score", ctx())));
            }
            Ok(Detection { image_id: d.image_id, category_id: d.category_id, bbox: checked_box(d.bbox, ctx)?, score: d.score })
        })
        .collect()
}

/// COCO records for one image's detections.
pub fn to_coco_detections(image_id: u64, dets: &[InstanceDetection]) -> Vec<CocoDetection> {
    dets.iter()
        .map(|d| CocoDetection { image_id, category_id: d.class_id as u64 + 1, bbox: d.bbox.to_coco(), score: d.score })
        .collect()
}
