//! COCO-style mean average precision: greedy confidence-ordered matching and
//! all-point interpolated PR curves.

use std::io::Write;
use std::path::Path;

use super::DetectionSet;
use crate::error::{Error, Result};
use crate::scenegen::{BBox, Category};

pub const COCO_THRESHOLDS: [f32; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Clone, Copy, Debug)]
pub struct GtBox {
    pub category: Category,
    pub bbox: BBox,
}

#[derive(Clone, Debug)]
pub struct ClassMetrics {
    pub category: Category,
    /// AP per requested threshold, aligned with the `thresholds` argument.
    pub ap: Vec<f32>,
}

impl ClassMetrics {
    fn mean_ap(&self) -> f32 {
        self.ap.iter().sum::<f32>() / self.ap.len() as f32
    }
}

#[derive(Clone, Debug)]
pub struct MapReport {
    pub thresholds: Vec<f32>,
    /// Classes with at least one ground-truth box.
    pub per_class: Vec<ClassMetrics>,
    /// Mean AP over classes at IoU 0.5 / 0.75 (NaN if not requested).
    pub ap50: f32,
    pub ap75: f32,
    /// Mean over classes and thresholds.
    pub map: f32,
}

/// AP for one (class, threshold): detections sorted by confidence, each
/// matched to the highest-IoU unmatched GT in its image if IoU >= threshold.
fn class_ap(
    dets: &[(usize, f32, BBox)],
    gts: &[Vec<BBox>],
    n_gt: usize,
    iou_thresh: f32,
) -> f32 {
    debug_assert!(n_gt > 0);
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(dets.len());
    for (img, _conf, bbox) in dets {
        let mut best: Option<(usize, f32)> = None;
        for (gi, gt) in gts[*img].iter().enumerate() {
            if matched[*img][gi] {
                continue;
            }
            let iou = bbox.iou(gt);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[*img][gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    // All-point interpolation: envelope[i] = max precision at recall >= r_i,
    // integrated over recall increments.
    let mut envelope = vec![0.0f64; points.len()];
    let mut run = 0.0f64;
    for i in (0..points.len()).rev() {
        run = run.max(points[i].1);
        envelope[i] = run;
    }
    let mut ap = 0.0f64;
    let mut prev_r = 0.0f64;
    for (i, (r, _)) in points.iter().enumerate() {
        if *r > prev_r {
            ap += (*r - prev_r) * envelope[i];
            prev_r = *r;
        }
    }
    ap as f32
}

/// Evaluate detections against ground truth, one entry per image.
/// Classes with no GT anywhere are excluded from the means.
pub fn evaluate_map(
    dets: &[DetectionSet],
    gts: &[Vec<GtBox>],
    thresholds: &[f32],
) -> Result<MapReport> {
    if dets.len() != gts.len() {
        return Err(Error::Detector(format!(
            "detections for {} images but ground truth for {}",
            dets.len(),
            gts.len()
        )));
    }
    if thresholds.is_empty() {
        return Err(Error::Detector("no IoU thresholds given".into()));
    }
    let mut per_class = Vec::new();
    for cat in Category::ALL {
        let class_gts: Vec<Vec<BBox>> = gts
            .iter()
            .map(|g| g.iter().filter(|x| x.category == cat).map(|x| x.bbox).collect())
            .collect();
        let n_gt: usize = class_gts.iter().map(|g| g.len()).sum();
        if n_gt == 0 {
            continue;
        }
        let mut class_dets: Vec<(usize, f32, BBox)> = Vec::new();
        for (img, ds) in dets.iter().enumerate() {
            for d in ds {
                if d.category == cat {
                    class_dets.push((img, d.confidence, d.bbox));
                }
            }
        }
        // Confidence-descending; ties broken by (image, insertion order) via
        // stable sort for full determinism.
        class_dets.sort_by(|a, b| b.1.total_cmp(&a.1));
        let ap: Vec<f32> = thresholds
            .iter()
            .map(|t| class_ap(&class_dets, &class_gts, n_gt, *t))
            .collect();
        per_class.push(ClassMetrics { category: cat, ap });
    }
    let mean_at = |ti: Option<usize>| -> f32 {
        match ti {
            Some(ti) if !per_class.is_empty() => {
                per_class.iter().map(|c| c.ap[ti]).sum::<f32>() / per_class.len() as f32
            }
            _ => f32::NAN,
        }
    };
    let find = |t: f32| thresholds.iter().position(|x| (x - t).abs() < 1e-6);
    let ap50 = mean_at(find(0.5));
    let ap75 = mean_at(find(0.75));
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.mean_ap()).sum::<f32>() / per_class.len() as f32
    };
    Ok(MapReport { thresholds: thresholds.to_vec(), per_class, ap50, ap75, map })
}

/// CSV rows `class, ap50, ap75, map` plus a `mean` summary row.
pub fn write_map_csv(report: &MapReport, path: &Path) -> Result<()> {
    let pos = |t: f32| report.thresholds.iter().position(|x| (x - t).abs() < 1e-6);
    let (i50, i75) = (pos(0.5), pos(0.75));
    let mut out = String::from("class,ap50,ap75,map\n");
    for c in &report.per_class {
        let at = |i: Option<usize>| i.map_or(f32::NAN, |i| c.ap[i]);
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            c.category.as_str(),
            at(i50),
            at(i75),
            c.mean_ap()
        ));
    }
    out.push_str(&format!("mean,{:.6},{:.6},{:.6}\n", report.ap50, report.ap75, report.map));
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
