//! Single-scale grid detector: a small conv backbone with one predicted box
//! per 8x8 cell. Serves three roles: attribute source for the perception
//! labels, detection-quality metric, and trainability testbed.

use std::path::Path;

use rand::Rng;

use crate::adam::{warmup_cosine_lr, Adam, AdamConfig};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::params::{BoundParams, Grads, ParamStore};
use crate::rng::stream;
use crate::scenegen::{BBox, Category, Image, ObjectAnnotation, Scene};
use crate::{init, rng};

pub mod map;

pub use map::{evaluate_map, GtBox, MapReport, COCO_THRESHOLDS};

const GN_GROUPS: usize = 4;
/// Backbone downsampling factor; one grid cell per 8x8 pixel block.
pub const CELL_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub category: Category,
    pub confidence: f32,
}

/// Per-image detections, post-NMS, sorted by descending confidence.
pub type DetectionSet = Vec<Detection>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetectorArch {
    pub image_size: usize,
    /// Base backbone width; stages run C, 2C, 4C, 8C.
    pub channels: usize,
    pub num_classes: usize,
}

impl Default for DetectorArch {
    fn default() -> Self {
        Self { image_size: 32, channels: 8, num_classes: Category::ALL.len() }
    }
}

impl DetectorArch {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % CELL_STRIDE != 0 || self.image_size < 16 {
            return Err(Error::Detector(format!(
                "image_size {} must be a multiple of {CELL_STRIDE} and at least 16",
                self.image_size
            )));
        }
        if self.channels % GN_GROUPS != 0 || self.channels == 0 {
            return Err(Error::Detector(format!(
                "channels {} must be a positive multiple of {GN_GROUPS}",
                self.channels
            )));
        }
        if self.num_classes == 0 || self.num_classes > Category::ALL.len() {
            return Err(Error::Detector(format!(
                "num_classes {} outside 1..={}",
                self.num_classes,
                Category::ALL.len()
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / CELL_STRIDE
    }

    pub fn head_channels(&self) -> usize {
        1 + self.num_classes + 4
    }

    /// Width of the mean-pooled penultimate feature (8C).
    pub fn feature_dim(&self) -> usize {
        8 * self.channels
    }
}

pub struct GridDetector {
    pub arch: DetectorArch,
    pub store: ParamStore,
}

impl GridDetector {
    pub fn new(arch: DetectorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream(seed, "detector-init", 0);
        let c = arch.channels;
        let widths = [c, 2 * c, 4 * c, 8 * c];
        let mut store = ParamStore::new();
        let mut cin = 3;
        for (i, cout) in widths.into_iter().enumerate() {
            store.add(
                &format!("detector/conv{i}.w"),
                init::he_conv(&mut rng, cout, cin, 3),
                &[cout, cin, 3, 3],
            )?;
            store.add(&format!("detector/gn{i}.g"), init::ones(cout), &[cout])?;
            store.add(&format!("detector/gn{i}.b"), init::zeros(cout), &[cout])?;
            cin = cout;
        }
        let hc = arch.head_channels();
        store.add(
            "detector/head.w",
            init::normal(&mut rng, hc * 8 * c, 0.01),
            &[hc, 8 * c, 1, 1],
        )?;
        store.add("detector/head.b", init::zeros(hc), &[hc])?;
        Ok(Self { arch, store })
    }

    fn var(&self, bound: &BoundParams, name: &str) -> Result<Var> {
        self.store
            .id(name)
            .map(|id| bound.var(id))
            .ok_or_else(|| Error::Detector(format!("missing parameter {name}")))
    }

    /// Run the backbone and head on one `[1,3,H,W]` input. Returns
    /// `(head [1,1+K+4,S,S], penultimate features [1,8C,S,S])`.
    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for i in 0..4 {
            let w = self.var(bound, &format!("detector/conv{i}.w"))?;
            let g = self.var(bound, &format!("detector/gn{i}.g"))?;
            let b = self.var(bound, &format!("detector/gn{i}.b"))?;
            let stride = if i == 0 { 1 } else { 2 };
            let y = tape.conv2d(h, w, stride, 1)?;
            let y = tape.group_norm(y, g, b, GN_GROUPS)?;
            h = tape.silu(y)?;
        }
        let feats = h;
        let w = self.var(bound, "detector/head.w")?;
        let b = self.var(bound, "detector/head.b")?;
        let head = tape.conv2d(feats, w, 1, 0)?;
        let head = tape.bias_add_channel(head, b)?;
        Ok((head, feats))
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.h != self.arch.image_size || image.w != self.arch.image_size {
            return Err(Error::Detector(format!(
                "image {}x{} does not match detector size {}",
                image.w, image.h, self.arch.image_size
            )));
        }
        Ok(())
    }

    fn infer(&self, image: &Image) -> Result<(Vec<f32>, Vec<f32>)> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let bound = BoundParams::bind_frozen(&mut tape, &self.store)?;
        let size = self.arch.image_size;
        let x = tape.leaf(image.to_chw_norm(), &[1, 3, size, size])?;
        let (head, feats) = self.forward_on(&mut tape, &bound, x)?;
        Ok((tape.values(head).to_vec(), tape.values(feats).to_vec()))
    }

    /// Decode + NMS on one image.
    pub fn detect(&self, image: &Image, conf_thresh: f32, nms_iou: f32) -> Result<DetectionSet> {
        let (head, _) = self.infer(image)?;
        let dets = decode_grid(&head, &self.arch, conf_thresh);
        Ok(nms(dets, nms_iou))
    }

    /// Mean-pooled penultimate activation (length 8C); the embedding used by
    /// the feature-distance metric.
    pub fn features(&self, image: &Image) -> Result<Vec<f32>> {
        let (_, feats) = self.infer(image)?;
        let s = self.arch.grid();
        let hw = s * s;
        let c = self.arch.feature_dim();
        let mut out = vec![0.0f32; c];
        for (ci, o) in out.iter_mut().enumerate() {
            let sum: f32 = feats[ci * hw..(ci + 1) * hw].iter().sum();
            *o = sum / hw as f32;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut archive = Archive::from_store(&self.store);
        let meta = [
            self.arch.image_size as f32,
            self.arch.channels as f32,
            self.arch.num_classes as f32,
        ];
        archive.push("meta/detector-arch", &[3], meta.to_vec());
        archive.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::read(path)?;
        let meta = archive.get("meta/detector-arch").ok_or_else(|| Error::Checkpoint {
            path: path.display().to_string(),
            msg: "missing meta/detector-arch".into(),
        })?;
        let arch = DetectorArch {
            image_size: meta.values[0] as usize,
            channels: meta.values[1] as usize,
            num_classes: meta.values[2] as usize,
        };
        arch.validate()?;
        let store = archive.to_store("detector/", path)?;
        Ok(Self { arch, store })
    }
}

/// Decode raw head values `[1+K+4, S, S]` into boxes, no NMS. Cells whose
/// confidence (sigmoid(obj) * max class prob) is below `conf_thresh` are
/// dropped; output is sorted by descending confidence.
pub fn decode_grid(head: &[f32], arch: &DetectorArch, conf_thresh: f32) -> Vec<Detection> {
    let s = arch.grid();
    let k = arch.num_classes;
    let hw = s * s;
    let cell = arch.image_size as f32 / s as f32;
    let size = arch.image_size as f32;
    debug_assert_eq!(head.len(), arch.head_channels() * hw);
    let at = |c: usize, gy: usize, gx: usize| head[c * hw + gy * s + gx];
    let sigmoid = |x: f32| 1.0 / (1.0 + (-x).exp());
    let mut dets = Vec::new();
    for gy in 0..s {
        for gx in 0..s {
            let obj = sigmoid(at(0, gy, gx));
            let mut best = 0;
            let mut best_logit = f32::NEG_INFINITY;
            for ci in 0..k {
                let l = at(1 + ci, gy, gx);
                if l > best_logit {
                    best_logit = l;
                    best = ci;
                }
            }
            let mut denom = 0.0f32;
            for ci in 0..k {
                denom += (at(1 + ci, gy, gx) - best_logit).exp();
            }
            let prob = 1.0 / denom;
            let conf = obj * prob;
            if conf < conf_thresh {
                continue;
            }
            let cx = (gx as f32 + sigmoid(at(1 + k, gy, gx))) * cell;
            let cy = (gy as f32 + sigmoid(at(1 + k + 1, gy, gx))) * cell;
            let w = at(1 + k + 2, gy, gx).min(4.0).exp() * size;
            let h = at(1 + k + 3, gy, gx).min(4.0).exp() * size;
            let bbox = BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
                .clamped(size, size);
            if !bbox.is_valid() {
                continue;
            }
            dets.push(Detection { bbox, category: Category::ALL[best], confidence: conf });
        }
    }
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    dets
}

/// Greedy per-class NMS: walk detections by descending confidence, drop any
/// box whose IoU with an already-kept box of the same class exceeds
/// `iou_thresh`.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f32) -> DetectionSet {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut keep: Vec<Detection> = Vec::with_capacity(dets.len());
    'outer: for d in dets {
        for k in &keep {
            if k.category == d.category && k.bbox.iou(&d.bbox) > iou_thresh {
                continue 'outer;
            }
        }
        keep.push(d);
    }
    keep
}

/// Training targets for one scene, laid out per grid cell.
struct CellTargets {
    obj: Vec<f32>,
    /// Grid indices of matched cells, aligned with `cls_onehot` rows.
    matched_cells: Vec<usize>,
    /// `[n_matched, K]` one-hot class rows.
    cls_onehot: Vec<f32>,
    /// `[4, S, S]` regression targets (dx, dy, ln w, ln h), zero off-match.
    box_t: Vec<f32>,
    /// `[4, S, S]` 1.0 on matched cells.
    box_mask: Vec<f32>,
}

fn build_targets(objects: &[ObjectAnnotation], arch: &DetectorArch) -> CellTargets {
    let s = arch.grid();
    let hw = s * s;
    let k = arch.num_classes;
    let cell = arch.image_size as f32 / s as f32;
    let size = arch.image_size as f32;
    let mut order: Vec<usize> = (0..objects.len()).collect();
    // Larger objects claim their cell first; ties resolved by index.
    order.sort_by(|&a, &b| {
        objects[b]
            .bbox
            .area()
            .total_cmp(&objects[a].bbox.area())
            .then(a.cmp(&b))
    });
    let mut t = CellTargets {
        obj: vec![0.0; hw],
        matched_cells: Vec::new(),
        cls_onehot: Vec::new(),
        box_t: vec![0.0; 4 * hw],
        box_mask: vec![0.0; 4 * hw],
    };
    for gi in order {
        let o = &objects[gi];
        if o.category.index() >= k {
            continue;
        }
        let (cx, cy) = o.bbox.center();
        let gx = ((cx / cell) as usize).min(s - 1);
        let gy = ((cy / cell) as usize).min(s - 1);
        let idx = gy * s + gx;
        if t.obj[idx] == 1.0 {
            continue;
        }
        t.obj[idx] = 1.0;
        t.matched_cells.push(idx);
        let mut row = vec![0.0; k];
        row[o.category.index()] = 1.0;
        t.cls_onehot.extend(row);
        t.box_t[idx] = cx / cell - gx as f32;
        t.box_t[hw + idx] = cy / cell - gy as f32;
        t.box_t[2 * hw + idx] = (o.bbox.width() / size).ln();
        t.box_t[3 * hw + idx] = (o.bbox.height() / size).ln();
        for c in 0..4 {
            t.box_mask[c * hw + idx] = 1.0;
        }
    }
    t
}

/// Composite loss for one sample: objectness BCE over all cells, class CE
/// and box L2 on matched cells.
fn sample_loss(tape: &mut Tape, head: Var, t: &CellTargets, arch: &DetectorArch) -> Result<Var> {
    let s = arch.grid();
    let hw = s * s;
    let k = arch.num_classes;
    let obj_logits = tape.slice_channels(head, 0, 1)?;
    let obj_logits = tape.reshape(obj_logits, &[1, hw])?;
    let obj_t = tape.leaf(t.obj.clone(), &[1, hw])?;
    let obj_loss = tape.bce_with_logits(obj_logits, obj_t)?;
    let n = t.matched_cells.len();
    if n == 0 {
        return Ok(obj_loss);
    }

    let cls = tape.slice_channels(head, 1, 1 + k)?;
    let cls = tape.reshape(cls, &[k, hw])?;
    let cls_rows = tape.transpose(cls)?;
    let sel = tape.embed(cls_rows, &t.matched_cells)?;
    let probs = tape.softmax_rows(sel)?;
    let logp = tape.log(probs)?;
    let onehot = tape.leaf(t.cls_onehot.clone(), &[n, k])?;
    let picked = tape.mul(logp, onehot)?;
    let ce_sum = tape.sum_all(picked)?;
    let cls_loss = tape.scale(ce_sum, -1.0 / n as f32)?;

    let boxes = tape.slice_channels(head, 1 + k, 1 + k + 4)?;
    let dxdy = tape.slice_channels(boxes, 0, 2)?;
    let dxdy = tape.sigmoid(dxdy)?;
    let wh = tape.slice_channels(boxes, 2, 4)?;
    let pred = tape.concat_channels(dxdy, wh)?;
    let mask = tape.leaf(t.box_mask.clone(), &[1, 4, s, s])?;
    let target = tape.leaf(t.box_t.clone(), &[1, 4, s, s])?;
    let masked = tape.mul(pred, mask)?;
    let diff = tape.sub(masked, target)?;
    let sq = tape.mul(diff, diff)?;
    let box_sum = tape.sum_all(sq)?;
    let box_loss = tape.scale(box_sum, 1.0 / (4 * n) as f32)?;

    let partial = tape.add(obj_loss, cls_loss)?;
    tape.add(partial, box_loss)
}

#[derive(Clone, Debug)]
pub struct DetectorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self { steps: 300, batch_size: 8, lr: 1e-3, weight_decay: 1e-4, warmup: 20, seed: 0 }
    }
}

pub struct TrainLog {
    pub losses: Vec<f32>,
}

/// Train in place. Batches are sampled with replacement from a per-step RNG
/// stream, so runs are reproducible for a fixed `(seed, cfg)`.
pub fn train_detector(
    model: &mut GridDetector,
    scenes: &[Scene],
    cfg: &DetectorTrainConfig,
) -> Result<TrainLog> {
    if scenes.is_empty() {
        return Err(Error::Detector("training dataset is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::Detector("steps and batch_size must be positive".into()));
    }
    for s in scenes {
        model.check_image(&s.image)?;
    }
    let size = model.arch.image_size;
    let inputs: Vec<Vec<f32>> = scenes.iter().map(|s| s.image.to_chw_norm()).collect();
    let targets: Vec<CellTargets> =
        scenes.iter().map(|s| build_targets(&s.objects, &model.arch)).collect();
    let mut adam = Adam::new(&model.store);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch_rng = rng::stream(cfg.seed, "detector-batch", step as u64);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &model.store)?;
        let mut total: Option<Var> = None;
        for _ in 0..cfg.batch_size {
            let i = batch_rng.gen_range(0..scenes.len());
            let x = tape.leaf(inputs[i].clone(), &[1, 3, size, size])?;
            let (head, _) = model.forward_on(&mut tape, &bound, x)?;
            let l = sample_loss(&mut tape, head, &targets[i], &model.arch)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let total = tape.scale(total.unwrap(), 1.0 / cfg.batch_size as f32)?;
        let loss = tape.scalar(total)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        tape.backward(total)?;
        let mut grads = Grads::new(&model.store);
        bound.harvest(&mut tape, &mut grads);
        let lr = warmup_cosine_lr(cfg.lr, cfg.warmup, cfg.steps, step);
        let adam_cfg = AdamConfig { lr, weight_decay: cfg.weight_decay, ..Default::default() };
        adam.step(&mut model.store, &grads, &adam_cfg)?;
        losses.push(loss);
    }
    Ok(TrainLog { losses })
}

/// Detect on every scene and score against its annotations.
pub fn evaluate_on(
    model: &GridDetector,
    scenes: &[Scene],
    conf_thresh: f32,
    nms_iou: f32,
    thresholds: &[f32],
) -> Result<MapReport> {
    let mut dets = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for s in scenes {
        dets.push(model.detect(&s.image, conf_thresh, nms_iou)?);
        gts.push(
            s.objects
                .iter()
                .map(|o| GtBox { category: o.category, bbox: o.bbox })
                .collect::<Vec<_>>(),
        );
    }
    evaluate_map(&dets, &gts, thresholds)
}

#[cfg(test)]
mod tests;
