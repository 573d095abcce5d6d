//! Trainability experiment: train detector arms on real data alone and on
//! real plus generated images (per attribute strategy, reusing the real
//! annotations), then compare held-out mAP.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::denoiser::UNet;
use crate::detector::{
    evaluate_on, train_detector, GridDetector, MapReport, COCO_THRESHOLDS,
};
use crate::error::{Error, Result};
use crate::pa_attr::{AttributeStrategy, PerceptionAttribute};
use crate::params::ParamStore;
use crate::pipeline::sample::Sampler;
use crate::pipeline::{scene_layout, RunConfig};
use crate::scenegen::Scene;

#[derive(Clone, Debug)]
pub struct TrainabilityArm {
    pub arm: String,
    pub images: usize,
    pub map: f32,
    pub ap50: f32,
    pub ap75: f32,
}

#[derive(Clone, Debug)]
pub struct TrainabilityReport {
    /// Rows in fixed order: real-only, real+origin, real+easy, real+hard.
    pub rows: Vec<TrainabilityArm>,
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the per-arm detector configuration; identical across arms by
    /// construction and asserted at runtime.
    pub arm_config_hash: String,
}

fn arm_hash(cfg: &RunConfig, seed: u64) -> String {
    let arch = cfg.detector_arch();
    let tcfg = cfg.detector_train_config(seed);
    let mut h = Sha256::new();
    h.update(format!("{arch:?}|{tcfg:?}").as_bytes());
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn train_and_eval(
    cfg: &RunConfig,
    scenes: &[Scene],
    val_scenes: &[Scene],
    seed: u64,
) -> Result<MapReport> {
    let mut det = GridDetector::new(cfg.detector_arch(), seed)?;
    train_detector(&mut det, scenes, &cfg.detector_train_config(seed))?;
    evaluate_on(
        &det,
        val_scenes,
        cfg.detector.eval_conf,
        cfg.detector.nms_iou,
        &COCO_THRESHOLDS,
    )
}

/// Build the synthetic set for one strategy: images sampled from the real
/// layouts, annotations copied from the source scenes.
pub fn generate_training_set(
    cfg: &RunConfig,
    diffusion: &ParamStore,
    real: &[Scene],
    attrs: &[Vec<PerceptionAttribute>],
    strategy: AttributeStrategy,
    seed: u64,
) -> Result<Vec<Scene>> {
    let vocab = cfg.vocabulary()?;
    let sched = cfg.build_schedule()?;
    let unet = UNet::new(cfg.unet_config())?;
    let layouts: Result<Vec<_>> = real
        .iter()
        .zip(attrs)
        .map(|(s, a)| scene_layout(s, a, &vocab, strategy))
        .collect();
    let sampler = Sampler {
        unet: &unet,
        store: diffusion,
        sched: &sched,
        image_size: cfg.scene.generator.image_size,
        ddim_steps: cfg.trainability.sample_steps,
        cfg_scale: cfg.sample.cfg_scale,
    };
    let images = sampler.sample_set(&layouts?, &vocab, seed)?;
    Ok(real
        .iter()
        .zip(images)
        .map(|(s, image)| Scene { image, objects: s.objects.clone(), seed: s.seed })
        .collect())
}

/// Run the four arms with identical detector seed/steps and score each on
/// the held-out real validation scenes.
pub fn eval_trainability(
    cfg: &RunConfig,
    diffusion: &ParamStore,
    train_scenes: &[Scene],
    train_attrs: &[Vec<PerceptionAttribute>],
    val_scenes: &[Scene],
    seed: u64,
) -> Result<TrainabilityReport> {
    if train_scenes.is_empty() || val_scenes.is_empty() {
        return Err(Error::Pipeline("trainability needs train and val scenes".into()));
    }
    if train_attrs.len() != train_scenes.len() {
        return Err(Error::Pipeline(format!(
            "{} attribute rows for {} train scenes",
            train_attrs.len(),
            train_scenes.len()
        )));
    }
    let g = cfg.trainability.gen_images.min(train_scenes.len());
    let real = &train_scenes[..g];
    let attrs = &train_attrs[..g];

    let expected_hash = arm_hash(cfg, seed);
    let run_arm = |scenes: &[Scene]| -> Result<MapReport> {
        let h = arm_hash(cfg, seed);
        if h != expected_hash {
            return Err(Error::Pipeline(format!(
                "detector arm config drift: {h} != {expected_hash}"
            )));
        }
        train_and_eval(cfg, scenes, val_scenes, seed)
    };

    let mut rows = Vec::with_capacity(4);
    let real_only = run_arm(real)?;
    rows.push(TrainabilityArm {
        arm: "real-only".into(),
        images: real.len(),
        map: real_only.map,
        ap50: real_only.ap50,
        ap75: real_only.ap75,
    });

    for (si, strategy) in
        [AttributeStrategy::Origin, AttributeStrategy::Easy, AttributeStrategy::Hard]
            .iter()
            .enumerate()
    {
        let gen_seed = crate::rng::stream(seed, "trainability-arm", si as u64).gen::<u64>();
        let gen = generate_training_set(cfg, diffusion, real, attrs, *strategy, gen_seed)?;
        let mut union = real.to_vec();
        union.extend(gen);
        let report = run_arm(&union)?;
        rows.push(TrainabilityArm {
            arm: format!("real+{}", strategy.as_str()),
            images: union.len(),
            map: report.map,
            ap50: report.ap50,
            ap75: report.ap75,
        });
    }

    Ok(TrainabilityReport {
        rows,
        seed,
        config_hash: cfg.hash(),
        arm_config_hash: expected_hash,
    })
}
