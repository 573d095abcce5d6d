//! Orchestration: run configuration, diffusion training, CFG sampling, the
//! fidelity and trainability experiments, and report emission.

pub mod fidelity;
pub mod frechet;
pub mod report;
pub mod sample;
pub mod train;
pub mod trainability;

pub use fidelity::{eval_fidelity, FidelityArm, FidelityReport};
pub use frechet::feature_frechet_distance;
pub use report::{write_fidelity, write_report, write_trainability};
pub use sample::{cfg_combine, Sampler};
pub use train::{
    init_diffusion_store, load_diffusion_store, train_diffusion, write_diffusion_checkpoint,
    TrainSummary,
};
pub use trainability::{eval_trainability, TrainabilityArm, TrainabilityReport};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{quantize_box, AnnotatedLayout, LayoutObject, Vocabulary};
use crate::denoiser::UNetConfig;
use crate::detector::{DetectorArch, DetectorTrainConfig, GtBox};
use crate::error::{Error, Result};
use crate::pa_attr::{
    apply_strategy, AttrConfig, AttrRecord, AttributeSource, AttributedObject, AttributeStrategy,
    PerceptionAttribute,
};
use crate::pa_loss::PaLossConfig;
use crate::scenegen::{Category, Scene, SceneConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub generator: SceneConfig,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self { train_scenes: 512, val_scenes: 64, generator: SceneConfig::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub base_channels: usize,
    pub cond_dim: usize,
    pub temb_dim: usize,
    pub feat_channels: usize,
    pub location_bins: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            base_channels: 16,
            cond_dim: crate::conditioning::DEFAULT_DIM,
            temb_dim: 64,
            feat_channels: crate::pa_loss::DEFAULT_FEAT_CHANNELS,
            location_bins: crate::conditioning::DEFAULT_BINS,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub channels: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup: usize,
    /// Confidence floor used when decoding detections for evaluation and
    /// attribute extraction; kept low so PR curves and the gamma filter see
    /// the full ranking.
    pub eval_conf: f32,
    pub nms_iou: f32,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            channels: 8,
            steps: 600,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            warmup: 20,
            eval_conf: 0.05,
            nms_iou: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionTrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup: usize,
    /// Probability of replacing the condition with the null token (CFG
    /// dropout). Null items contribute no perception loss.
    pub null_prob: f64,
    /// Periodic checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for DiffusionTrainSection {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 2e-4,
            weight_decay: 0.0,
            warmup: 100,
            null_prob: 0.10,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub cfg_scale: f32,
    pub steps: usize,
    pub strategy: AttributeStrategy,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { cfg_scale: 3.5, steps: 50, strategy: AttributeStrategy::Origin }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FidelitySection {
    /// Validation layouts per strategy; 0 uses the whole validation set.
    pub images: usize,
}

impl Default for FidelitySection {
    fn default() -> Self {
        Self { images: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainabilitySection {
    /// Generated images per strategy arm (layouts reuse the first train
    /// annotations).
    pub gen_images: usize,
    /// DDIM steps for synthetic-set generation (cheaper than the fidelity
    /// sampler is fine here).
    pub sample_steps: usize,
}

impl Default for TrainabilitySection {
    fn default() -> Self {
        Self { gen_images: 64, sample_steps: 20 }
    }
}

/// Whole-run configuration; one file drives every subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub workdir: PathBuf,
    pub scene: SceneSection,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub attr: AttrConfig,
    pub loss: PaLossConfig,
    pub detector: DetectorSection,
    pub train: DiffusionTrainSection,
    pub sample: SampleSection,
    pub fidelity: FidelitySection,
    pub trainability: TrainabilitySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workdir: PathBuf::from("run"),
            scene: SceneSection::default(),
            schedule: ScheduleSection::default(),
            model: ModelSection::default(),
            attr: AttrConfig::default(),
            loss: PaLossConfig::default(),
            detector: DetectorSection::default(),
            train: DiffusionTrainSection::default(),
            sample: SampleSection::default(),
            fidelity: FidelitySection::default(),
            trainability: TrainabilitySection::default(),
        }
    }
}

impl RunConfig {
    /// Parse and validate a TOML config file. Unknown keys are fatal.
    pub fn load(path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Config { path: path.display().to_string(), msg };
        let text = std::fs::read_to_string(path)
            .map_err(|e| fail(format!("cannot read config: {e}")))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| fail(e.to_string()))?;
        cfg.validate().map_err(|e| fail(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Pipeline(msg));
        self.scene.generator.validate()?;
        self.attr.validate()?;
        self.loss.validate()?;
        self.unet_config().validate()?;
        self.detector_arch().validate()?;
        let size = self.scene.generator.image_size;
        if size % 8 != 0 {
            return bad(format!("scene.generator.image_size {size} must be divisible by 8"));
        }
        if self.scene.train_scenes == 0 || self.scene.val_scenes == 0 {
            return bad("scene.train_scenes and scene.val_scenes must be positive".into());
        }
        if self.schedule.steps == 0 {
            return bad("schedule.steps must be positive".into());
        }
        if !(self.schedule.beta_start > 0.0 && self.schedule.beta_end < 1.0) {
            return bad(format!(
                "schedule betas ({}, {}) outside (0,1)",
                self.schedule.beta_start, self.schedule.beta_end
            ));
        }
        if self.model.location_bins < 2 {
            return bad(format!("model.location_bins {} must be >= 2", self.model.location_bins));
        }
        for (name, steps, batch) in [
            ("detector", self.detector.steps, self.detector.batch_size),
            ("train", self.train.steps, self.train.batch_size),
        ] {
            if steps == 0 || batch == 0 {
                return bad(format!("{name}.steps and {name}.batch_size must be positive"));
            }
        }
        if !(self.detector.lr > 0.0) || !(self.train.lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.train.null_prob) {
            return bad(format!("train.null_prob {} outside [0,1]", self.train.null_prob));
        }
        if !(0.0..1.0).contains(&self.detector.eval_conf) {
            return bad(format!("detector.eval_conf {} outside [0,1)", self.detector.eval_conf));
        }
        if !(0.0..1.0).contains(&self.detector.nms_iou) {
            return bad(format!("detector.nms_iou {} outside [0,1)", self.detector.nms_iou));
        }
        if self.sample.steps == 0 || self.sample.steps > self.schedule.steps {
            return bad(format!(
                "sample.steps {} outside 1..={}",
                self.sample.steps, self.schedule.steps
            ));
        }
        if self.trainability.sample_steps == 0
            || self.trainability.sample_steps > self.schedule.steps
        {
            return bad(format!(
                "trainability.sample_steps {} outside 1..={}",
                self.trainability.sample_steps, self.schedule.steps
            ));
        }
        if !(self.sample.cfg_scale.is_finite()) {
            return bad("sample.cfg_scale must be finite".into());
        }
        if self.trainability.gen_images == 0 {
            return bad("trainability.gen_images must be positive".into());
        }
        Ok(())
    }

    /// Hash of the canonical JSON serialization; embedded in every report.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    pub fn paths(&self) -> Paths {
        Paths { workdir: self.workdir.clone() }
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            base_channels: self.model.base_channels,
            cond_dim: self.model.cond_dim,
            temb_dim: self.model.temb_dim,
            groups: 4,
        }
    }

    pub fn detector_arch(&self) -> DetectorArch {
        DetectorArch {
            image_size: self.scene.generator.image_size,
            channels: self.detector.channels,
            num_classes: Category::ALL.len(),
        }
    }

    pub fn detector_train_config(&self, seed: u64) -> DetectorTrainConfig {
        DetectorTrainConfig {
            steps: self.detector.steps,
            batch_size: self.detector.batch_size,
            lr: self.detector.lr,
            weight_decay: self.detector.weight_decay,
            warmup: self.detector.warmup,
            seed,
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(&Category::ALL, self.model.location_bins)
    }

    pub fn build_schedule(&self) -> Result<crate::schedule::Schedule> {
        crate::schedule::Schedule::linear(
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )
    }
}

/// Filesystem layout under the run's working directory.
#[derive(Clone, Debug)]
pub struct Paths {
    pub workdir: PathBuf,
}

impl Paths {
    pub fn train_data(&self) -> PathBuf {
        self.workdir.join("data").join("train")
    }
    pub fn val_data(&self) -> PathBuf {
        self.workdir.join("data").join("val")
    }
    pub fn detector(&self) -> PathBuf {
        self.workdir.join("detector.pdck")
    }
    pub fn detector_map_csv(&self) -> PathBuf {
        self.workdir.join("detector_map.csv")
    }
    pub fn attr_train(&self) -> PathBuf {
        self.workdir.join("attr_train.jsonl")
    }
    pub fn attr_val(&self) -> PathBuf {
        self.workdir.join("attr_val.jsonl")
    }
    pub fn diffusion(&self) -> PathBuf {
        self.workdir.join("diffusion.pdck")
    }
    pub fn checkpoints_dir(&self) -> PathBuf {
        self.workdir.join("checkpoints")
    }
    pub fn loss_csv(&self) -> PathBuf {
        self.workdir.join("loss.csv")
    }
    pub fn samples_dir(&self, strategy: AttributeStrategy) -> PathBuf {
        self.workdir.join("samples").join(strategy.as_str())
    }
    pub fn fidelity_csv(&self) -> PathBuf {
        self.workdir.join("fidelity.csv")
    }
    pub fn fidelity_txt(&self) -> PathBuf {
        self.workdir.join("fidelity.txt")
    }
    pub fn trainability_csv(&self) -> PathBuf {
        self.workdir.join("trainability.csv")
    }
    pub fn trainability_txt(&self) -> PathBuf {
        self.workdir.join("trainability.txt")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.workdir.join("report.txt")
    }
}

/// Group a flat attribute dump by scene and align it with the dataset.
pub fn attrs_by_scene(
    records: &[AttrRecord],
    scenes: &[Scene],
) -> Result<Vec<Vec<PerceptionAttribute>>> {
    let mut out: Vec<Vec<PerceptionAttribute>> =
        scenes.iter().map(|s| Vec::with_capacity(s.objects.len())).collect();
    for r in records {
        let slot = out.get_mut(r.scene).ok_or_else(|| {
            Error::Attribute(format!("record references scene {} of {}", r.scene, scenes.len()))
        })?;
        if r.object != slot.len() {
            return Err(Error::Attribute(format!(
                "scene {}: object index {} out of order (expected {})",
                r.scene,
                r.object,
                slot.len()
            )));
        }
        slot.push(r.attribute);
    }
    for (i, (attrs, scene)) in out.iter().zip(scenes).enumerate() {
        if attrs.len() != scene.objects.len() {
            return Err(Error::Attribute(format!(
                "scene {i}: {} attribute records for {} objects",
                attrs.len(),
                scene.objects.len()
            )));
        }
    }
    Ok(out)
}

/// Build the conditioning layout for a scene: stored attributes, strategy
/// override, then box quantization. Objects keep annotation order.
pub fn scene_layout(
    scene: &Scene,
    attrs: &[PerceptionAttribute],
    vocab: &Vocabulary,
    strategy: AttributeStrategy,
) -> Result<AnnotatedLayout> {
    if attrs.len() != scene.objects.len() {
        return Err(Error::Pipeline(format!(
            "{} attributes for {} objects",
            attrs.len(),
            scene.objects.len()
        )));
    }
    let attributed: Vec<AttributedObject> = scene
        .objects
        .iter()
        .zip(attrs)
        .map(|(o, a)| AttributedObject {
            category: o.category,
            bbox: o.bbox,
            attribute: *a,
            source: AttributeSource::Detector,
        })
        .collect();
    let overridden = apply_strategy(&attributed, strategy);
    let (w, h) = (scene.image.w, scene.image.h);
    let mut objects = Vec::with_capacity(overridden.len());
    for o in &overridden {
        let (tl, br) = quantize_box(&o.bbox, w, h, vocab.n_bins())?;
        objects.push(LayoutObject {
            category: o.category,
            tl_bin: tl,
            br_bin: br,
            attribute: o.attribute,
        });
    }
    Ok(AnnotatedLayout { objects, image_w: w, image_h: h, strategy })
}

/// Per-object binary masks as flat f32 rows, in annotation order.
pub fn gt_masks(scene: &Scene) -> Vec<Vec<f32>> {
    scene
        .objects
        .iter()
        .map(|o| o.mask.bits.iter().map(|&b| f32::from(b)).collect())
        .collect()
}

/// Ground-truth boxes in the mAP evaluator's shape.
pub fn gt_boxes(scene: &Scene) -> Vec<GtBox> {
    scene.objects.iter().map(|o| GtBox { category: o.category, bbox: o.bbox }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_hash_is_stable() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let h1 = cfg.hash();
        let h2 = cfg.hash();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 64);
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(h1, other.hash());
    }

    #[test]
    fn toml_roundtrip_and_unknown_keys_fatal() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, &text).unwrap();
        let back = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.hash(), back.hash());

        std::fs::write(&p, format!("{text}\nnot_a_key = 3\n")).unwrap();
        let err = RunConfig::load(&p).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");

        let missing = dir.path().join("absent.toml");
        let err = RunConfig::load(&missing).unwrap_err();
        assert!(err.to_string().contains("absent.toml"));
    }

    #[test]
    fn invalid_sections_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.scene.generator.image_size = 20;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.sample.steps = cfg.schedule.steps + 1;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.train.null_prob = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.attr.gamma = 2.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scene_layout_quantizes_in_annotation_order() {
        let cfg = crate::scenegen::SceneConfig {
            image_size: 32,
            min_objects: 2,
            max_objects: 3,
            ..Default::default()
        };
        let scene = crate::scenegen::generate_scene(7, &cfg).unwrap();
        let vocab = Vocabulary::new(&Category::ALL, 16).unwrap();
        let attrs = vec![PerceptionAttribute::Easy; scene.objects.len()];
        let layout = scene_layout(&scene, &attrs, &vocab, AttributeStrategy::Hard).unwrap();
        assert_eq!(layout.objects.len(), scene.objects.len());
        for (lo, o) in layout.objects.iter().zip(&scene.objects) {
            assert_eq!(lo.category, o.category);
            assert_eq!(lo.attribute, PerceptionAttribute::Hard);
            let (tl, br) = quantize_box(&o.bbox, 32, 32, 16).unwrap();
            assert_eq!((lo.tl_bin, lo.br_bin), (tl, br));
        }
        // Wrong attribute count is rejected.
        assert!(scene_layout(&scene, &attrs[..1], &vocab, AttributeStrategy::Origin).is_err());
    }

    #[test]
    fn attrs_by_scene_checks_alignment() {
        let cfg = crate::scenegen::SceneConfig {
            image_size: 16,
            min_objects: 1,
            max_objects: 2,
            max_occlusion: 0.0,
            ..Default::default()
        };
        let scenes: Vec<Scene> =
            (0..3).map(|i| crate::scenegen::generate_scene(i, &cfg).unwrap()).collect();
        let mut records = Vec::new();
        for (si, s) in scenes.iter().enumerate() {
            for (oi, o) in s.objects.iter().enumerate() {
                records.push(AttrRecord {
                    scene: si,
                    object: oi,
                    category: o.category,
                    bbox: o.bbox,
                    attribute: PerceptionAttribute::Hard,
                    source: AttributeSource::Detector,
                    max_iou: 0.0,
                    best_conf: 0.0,
                });
            }
        }
        let grouped = attrs_by_scene(&records, &scenes).unwrap();
        assert_eq!(grouped.len(), 3);
        for (g, s) in grouped.iter().zip(&scenes) {
            assert_eq!(g.len(), s.objects.len());
        }
        // Missing one record fails the count check.
        let short = &records[..records.len() - 1];
        assert!(attrs_by_scene(short, &scenes).is_err());
    }
}
