//! Synthetic detection scenes: hard-edged shapes over a value-noise
//! background, with instance masks, tight boxes, and controllable hardness
//! factors (occlusion, contrast, scale).
//!
//! Z-order is placement order: the first-placed object is topmost, so every
//! object's visible mask and realized occlusion are fixed the moment it is
//! placed and never disturbed by later objects.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

pub mod dataset;
mod render;
pub mod rle;

pub use rle::Rle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Circle,
    Square,
    Triangle,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Circle, Category::Square, Category::Triangle];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Circle => "circle",
            Category::Square => "square",
            Category::Triangle => "triangle",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    /// Stable class index (used by the detector head).
    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|c| c == self).unwrap()
    }
}

/// Pixel-space rectangle, `min` inclusive / `max` exclusive, so a mask pixel
/// (x, y) alone yields the box (x, y, x+1, y+1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BBox {
    pub fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
    }

    pub fn area(&self) -> f32 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Intersection-over-union. Assumes both boxes are valid; see
    /// [`crate::pa_attr::iou`] for the checked entry point.
    pub fn iou(&self, other: &BBox) -> f32 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            return 0.0;
        }
        inter / union
    }

    /// Clamp corners into an image of the given size.
    pub fn clamped(&self, w: f32, h: f32) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, w),
            y_min: self.y_min.clamp(0.0, h),
            x_max: self.x_max.clamp(0.0, w),
            y_max: self.y_max.clamp(0.0, h),
        }
    }
}

/// Row-major binary instance mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Self {
        debug_assert_eq!(bits.len(), h * w);
        Self { h, w, bits }
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    /// Tight bounding rectangle of the set pixels.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut any = false;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.bits[y * self.w + x] {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then(|| BBox::new(x0 as f32, y0 as f32, (x1 + 1) as f32, (y1 + 1) as f32))
    }
}

/// Per-object difficulty controls. `occlusion_frac` is the realized hidden
/// fraction, measured at placement time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardnessFactors {
    pub occlusion_frac: f32,
    pub contrast: f32,
    pub scale_frac: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectAnnotation {
    pub category: Category,
    /// Tight box around the visible mask.
    pub bbox: BBox,
    /// Visible pixels only (occluded parts excluded).
    pub mask: Mask,
    pub hardness: HardnessFactors,
}

/// RGB image, HWC interleaved, values in [0,1] pre-quantized to the 8-bit
/// grid (k/255) so PNG round-trips are lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn from_unquantized(h: usize, w: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), h * w * 3);
        let data = data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        Self { h, w, data }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_u8(h: usize, w: usize, bytes: &[u8]) -> Self {
        debug_assert_eq!(bytes.len(), h * w * 3);
        Self { h, w, data: bytes.iter().map(|b| *b as f32 / 255.0).collect() }
    }

    /// CHW tensor scaled to [-1, 1] (diffusion/detector input space).
    pub fn to_chw_norm(&self) -> Vec<f32> {
        let hw = self.h * self.w;
        let mut out = vec![0.0; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                out[c * hw + i] = self.data[i * 3 + c] * 2.0 - 1.0;
            }
        }
        out
    }

    /// Inverse of [`Self::to_chw_norm`], with clamping and re-quantization.
    pub fn from_chw_norm(h: usize, w: usize, chw: &[f32]) -> Self {
        debug_assert_eq!(chw.len(), 3 * h * w);
        let hw = h * w;
        let mut data = vec![0.0; hw * 3];
        for i in 0..hw {
            for c in 0..3 {
                data[i * 3 + c] = (chw[c * hw + i].clamp(-1.0, 1.0) + 1.0) / 2.0;
            }
        }
        Self::from_unquantized(h, w, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<ObjectAnnotation>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Square image side in pixels, at least 16.
    pub image_size: usize,
    pub categories: Vec<Category>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object radius as a fraction of image_size/2, sampled per object.
    pub min_scale: f32,
    pub max_scale: f32,
    pub min_contrast: f32,
    pub max_contrast: f32,
    /// Upper bound of the per-object occlusion target. 0 forces disjoint
    /// objects.
    pub max_occlusion: f32,
    /// Enforce the 2%-of-image visible-area floor per object.
    pub area_filter: bool,
    /// Whole-scene placement retries before giving up.
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            categories: Category::ALL.to_vec(),
            min_objects: 3,
            max_objects: 8,
            min_scale: 0.24,
            max_scale: 0.45,
            min_contrast: 0.3,
            max_contrast: 1.0,
            max_occlusion: 0.35,
            area_filter: true,
            max_attempts: 64,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Scene(msg));
        if self.image_size < 16 {
            return bad(format!("image_size {} < 16", self.image_size));
        }
        if self.categories.is_empty() {
            return bad("empty category palette".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!(
                "object count range {}..={} invalid",
                self.min_objects, self.max_objects
            ));
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale && self.max_scale <= 1.0) {
            return bad(format!("scale range {}..{} invalid", self.min_scale, self.max_scale));
        }
        if !(self.min_contrast > 0.0
            && self.min_contrast <= self.max_contrast
            && self.max_contrast <= 1.0)
        {
            return bad(format!(
                "contrast range {}..{} invalid",
                self.min_contrast, self.max_contrast
            ));
        }
        if !(0.0..1.0).contains(&self.max_occlusion) {
            return bad(format!("max_occlusion {} outside [0,1)", self.max_occlusion));
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1".into());
        }
        Ok(())
    }

    fn min_visible_area(&self) -> f64 {
        if self.area_filter {
            0.02 * (self.image_size * self.image_size) as f64
        } else {
            1.0
        }
    }
}

fn sample_range(rng: &mut impl Rng, lo: f32, hi: f32) -> f32 {
    if lo >= hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Generate one scene. Bit-identical for identical `(seed, cfg)`; fails
/// explicitly when no valid placement exists within the retry budget.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    for attempt in 0..cfg.max_attempts {
        let mut rng = stream(seed, "scene-attempt", attempt as u64);
        if let Some(scene) = try_generate(&mut rng, seed, cfg) {
            return Ok(scene);
        }
    }
    Err(Error::Scene(format!(
        "seed {seed}: no valid object placement after {} attempts",
        cfg.max_attempts
    )))
}

struct PlacedObject {
    category: Category,
    visible: Mask,
    color: [f32; 3],
    hardness: HardnessFactors,
}

fn try_generate(rng: &mut impl Rng, seed: u64, cfg: &SceneConfig) -> Option<Scene> {
    let size = cfg.image_size;
    let mut canvas = render::background(rng, size);
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut occupied = vec![false; size * size];
    let mut placed: Vec<PlacedObject> = Vec::with_capacity(count);
    for i in 0..count {
        let category = cfg.categories[rng.gen_range(0..cfg.categories.len())];
        let scale = sample_range(rng, cfg.min_scale, cfg.max_scale);
        let contrast = sample_range(rng, cfg.min_contrast, cfg.max_contrast);
        // The first object sits on top of everything, so it cannot be
        // occluded; its target is pinned to 0.
        let occ_target =
            if i == 0 { 0.0 } else { sample_range(rng, 0.0, cfg.max_occlusion) };
        let mut color = [0.0f32; 3];
        for c in color.iter_mut() {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let jitter: f32 = rng.gen_range(-0.05..0.05);
            *c = (0.5 + sign * (0.12 + 0.33 * contrast) + jitter).clamp(0.02, 0.98);
        }
        let obj = place_object(rng, category, scale, contrast, occ_target, &occupied, cfg)?;
        for (o, b) in occupied.iter_mut().zip(&obj.full_bits) {
            *o |= *b;
        }
        placed.push(PlacedObject {
            category,
            visible: Mask::new(size, size, obj.visible_bits),
            color,
            hardness: HardnessFactors {
                occlusion_frac: obj.realized_occlusion,
                contrast,
                scale_frac: scale,
            },
        });
    }

    // Visible masks are pairwise disjoint, so paint order is irrelevant.
    for obj in &placed {
        for (i, on) in obj.visible.bits.iter().enumerate() {
            if *on {
                canvas[i * 3..i * 3 + 3].copy_from_slice(&obj.color);
            }
        }
    }
    let image = Image::from_unquantized(size, size, canvas);

    let mut objects = Vec::with_capacity(placed.len());
    for p in placed {
        let bbox = p.visible.tight_bbox()?;
        objects.push(ObjectAnnotation {
            category: p.category,
            bbox,
            mask: p.visible,
            hardness: p.hardness,
        });
    }
    Some(Scene { image, objects, seed })
}

struct Placement {
    full_bits: Vec<bool>,
    visible_bits: Vec<bool>,
    realized_occlusion: f32,
}

const PLACEMENT_CANDIDATES: usize = 300;
const OCCLUSION_TOLERANCE: f64 = 0.10;
const MAX_REALIZED_OCCLUSION: f64 = 0.6;

fn place_object(
    rng: &mut impl Rng,
    category: Category,
    scale: f32,
    _contrast: f32,
    occ_target: f32,
    occupied: &[bool],
    cfg: &SceneConfig,
) -> Option<Placement> {
    let size = cfg.image_size;
    let r = scale as f64 * size as f64 / 2.0;
    let ext = render::extent(category, r).ceil();
    let (lo, hi) = (ext, size as f64 - ext);
    if lo >= hi {
        return None;
    }
    let min_visible = cfg.min_visible_area();
    for _ in 0..PLACEMENT_CANDIDATES {
        let cx = rng.gen_range(lo..hi);
        let cy = rng.gen_range(lo..hi);
        let full_bits = render::rasterize(category, cx, cy, r, size);
        let full_area = full_bits.iter().filter(|b| **b).count();
        if full_area == 0 {
            continue;
        }
        let hidden =
            full_bits.iter().zip(occupied).filter(|(b, o)| **b && **o).count();
        let realized = hidden as f64 / full_area as f64;
        let visible_area = full_area - hidden;
        if (visible_area as f64) < min_visible {
            continue;
        }
        let occ_ok = if occ_target == 0.0 {
            hidden == 0
        } else {
            (realized - occ_target as f64).abs() <= OCCLUSION_TOLERANCE
                && realized <= MAX_REALIZED_OCCLUSION
        };
        if !occ_ok {
            continue;
        }
        let visible_bits: Vec<bool> =
            full_bits.iter().zip(occupied).map(|(b, o)| *b && !*o).collect();
        return Some(Placement {
            full_bits,
            visible_bits,
            realized_occlusion: realized as f32,
        });
    }
    None
}

/// Generate `count` scenes from a master seed, parallel across scenes.
/// Scene i derives its own seed from `(master_seed, i)`, so serial and
/// parallel runs agree bit-exactly.
pub fn generate_dataset(master_seed: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<Scene>> {
    use rayon::prelude::*;
    cfg.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let scene_seed = stream(master_seed, "scene-seed", i as u64).gen::<u64>();
            generate_scene(scene_seed, cfg)
        })
        .collect()
}
