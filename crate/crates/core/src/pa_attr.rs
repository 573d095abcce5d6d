//! Perception-aware attributes: confidence filtering, IoU matching, and the
//! easy/hard/background assignment that feeds the conditioning prompt, plus
//! the generation-time override strategies.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{Detection, DetectionSet};
use crate::error::{Error, Result};
use crate::scenegen::{BBox, Category};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerceptionAttribute {
    Easy,
    Hard,
    Background,
}

impl PerceptionAttribute {
    pub fn as_str(&self) -> &'static str {
        match self {
            PerceptionAttribute::Easy => "easy",
            PerceptionAttribute::Hard => "hard",
            PerceptionAttribute::Background => "background",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeSource {
    Detector,
    Override,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributedObject {
    pub category: Category,
    pub bbox: BBox,
    pub attribute: PerceptionAttribute,
    pub source: AttributeSource,
}

/// Generation-time attribute strategy: keep detector labels, or force every
/// in-vocabulary object easy/hard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeStrategy {
    Origin,
    Easy,
    Hard,
}

impl AttributeStrategy {
    pub const ALL: [AttributeStrategy; 3] =
        [AttributeStrategy::Origin, AttributeStrategy::Easy, AttributeStrategy::Hard];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttributeStrategy::Origin => "origin",
            AttributeStrategy::Easy => "easy",
            AttributeStrategy::Hard => "hard",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttrConfig {
    /// Confidence floor gamma: detections below it are discarded.
    pub gamma: f32,
    /// IoU threshold beta: easy requires IoU strictly greater.
    pub beta: f32,
    /// Require the matching detection to share the GT class.
    pub class_aware: bool,
}

impl Default for AttrConfig {
    fn default() -> Self {
        Self { gamma: 0.30, beta: 0.50, class_aware: false }
    }
}

impl AttrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Attribute(format!("gamma {} outside [0,1]", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Attribute(format!("beta {} outside [0,1)", self.beta)));
        }
        Ok(())
    }
}

/// Intersection-over-union of two boxes; rejects degenerate inputs.
pub fn iou(a: &BBox, b: &BBox) -> Result<f32> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::Attribute(format!("degenerate box: {a:?} vs {b:?}")));
    }
    Ok(a.iou(b))
}

/// Keep detections with confidence >= gamma, preserving order.
pub fn filter_by_confidence(dets: &[Detection], gamma: f32) -> Result<DetectionSet> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Attribute(format!("gamma {gamma} outside [0,1]")));
    }
    Ok(dets.iter().filter(|d| d.confidence >= gamma).cloned().collect())
}

/// Best match for one GT box: (max IoU, confidence of the detection that
/// achieves it; IoU ties broken by higher confidence). Both 0 when no
/// detection qualifies.
fn best_match(
    gt_cat: Category,
    gt_box: &BBox,
    dets: &[Detection],
    class_aware: bool,
) -> (f32, f32) {
    let mut max_iou = 0.0f32;
    let mut best_conf = 0.0f32;
    for d in dets {
        if class_aware && d.category != gt_cat {
            continue;
        }
        let i = gt_box.iou(&d.bbox);
        if i > max_iou || (i == max_iou && i > 0.0 && d.confidence > best_conf) {
            max_iou = i;
            best_conf = d.confidence;
        }
    }
    (max_iou, best_conf)
}

/// Assign easy/hard per GT: easy iff some already-filtered detection has
/// IoU strictly greater than `beta`. Categories outside `vocabulary` get
/// background regardless of overlap.
pub fn assign_attributes(
    gts: &[(Category, BBox)],
    dets: &[Detection],
    beta: f32,
    class_aware: bool,
    vocabulary: &[Category],
) -> Result<Vec<AttributedObject>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Attribute(format!("beta {beta} outside [0,1)")));
    }
    let mut out = Vec::with_capacity(gts.len());
    for (cat, bbox) in gts {
        if !bbox.is_valid() {
            return Err(Error::Attribute(format!("degenerate ground-truth box {bbox:?}")));
        }
        let attribute = if !vocabulary.contains(cat) {
            PerceptionAttribute::Background
        } else {
            let (max_iou, _) = best_match(*cat, bbox, dets, class_aware);
            if max_iou > beta {
                PerceptionAttribute::Easy
            } else {
                PerceptionAttribute::Hard
            }
        };
        out.push(AttributedObject {
            category: *cat,
            bbox: *bbox,
            attribute,
            source: AttributeSource::Detector,
        });
    }
    Ok(out)
}

/// Apply a generation strategy. Background objects are exempt; overridden
/// attributes are marked `source = override`.
pub fn apply_strategy(
    objects: &[AttributedObject],
    strategy: AttributeStrategy,
) -> Vec<AttributedObject> {
    objects
        .iter()
        .map(|o| {
            let forced = match strategy {
                AttributeStrategy::Origin => None,
                AttributeStrategy::Easy => Some(PerceptionAttribute::Easy),
                AttributeStrategy::Hard => Some(PerceptionAttribute::Hard),
            };
            match forced {
                Some(attr) if o.attribute != PerceptionAttribute::Background => {
                    AttributedObject { attribute: attr, source: AttributeSource::Override, ..o.clone() }
                }
                _ => o.clone(),
            }
        })
        .collect()
}

/// One audit line per Eq. 2 decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttrRecord {
    pub scene: usize,
    pub object: usize,
    pub category: Category,
    pub bbox: BBox,
    pub attribute: PerceptionAttribute,
    pub source: AttributeSource,
    pub max_iou: f32,
    pub best_conf: f32,
}

/// Full per-scene pipeline with audit info: confidence filter, Eq. 2
/// assignment, and the matching evidence for each object.
pub fn attribute_records(
    scene: usize,
    gts: &[(Category, BBox)],
    dets: &[Detection],
    cfg: &AttrConfig,
    vocabulary: &[Category],
) -> Result<Vec<AttrRecord>> {
    cfg.validate()?;
    let filtered = filter_by_confidence(dets, cfg.gamma)?;
    let assigned = assign_attributes(gts, &filtered, cfg.beta, cfg.class_aware, vocabulary)?;
    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(object, a)| {
            let (max_iou, best_conf) =
                best_match(a.category, &a.bbox, &filtered, cfg.class_aware);
            AttrRecord {
                scene,
                object,
                category: a.category,
                bbox: a.bbox,
                attribute: a.attribute,
                source: a.source,
                max_iou,
                best_conf,
            }
        })
        .collect())
}

pub fn write_attr_jsonl(records: &[AttrRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Attribute(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_attr_jsonl(path: &Path) -> Result<Vec<AttrRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Attribute(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}
