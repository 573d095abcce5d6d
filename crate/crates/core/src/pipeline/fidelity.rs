//! Layout-fidelity experiment: detector mAP and feature-Fréchet distance of
//! generated images per attribute strategy, with the real validation set as
//! an upper reference.

use rand::Rng;

use crate::denoiser::UNet;
use crate::detector::{evaluate_map, DetectionSet, GridDetector, MapReport, COCO_THRESHOLDS};
use crate::error::{Error, Result};
use crate::pa_attr::{AttributeStrategy, PerceptionAttribute};
use crate::params::ParamStore;
use crate::pipeline::sample::Sampler;
use crate::pipeline::{frechet, gt_boxes, scene_layout, RunConfig};
use crate::scenegen::{Image, Scene};

/// One row of the fidelity table.
#[derive(Clone, Debug)]
pub struct FidelityArm {
    pub arm: String,
    pub images: usize,
    pub map: f32,
    pub ap50: f32,
    pub ap75: f32,
    pub ffd: f64,
}

#[derive(Clone, Debug)]
pub struct FidelityReport {
    /// Rows in fixed order: real, origin, easy, hard.
    pub rows: Vec<FidelityArm>,
    pub seed: u64,
    pub config_hash: String,
}

fn score(
    detector: &GridDetector,
    images: &[&Image],
    gts: &[Vec<crate::detector::GtBox>],
    eval_conf: f32,
    nms_iou: f32,
) -> Result<MapReport> {
    let dets: Result<Vec<DetectionSet>> =
        images.iter().map(|im| detector.detect(im, eval_conf, nms_iou)).collect();
    evaluate_map(&dets?, gts, &COCO_THRESHOLDS)
}

fn features_of(detector: &GridDetector, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
    images.iter().map(|im| detector.features(im)).collect()
}

/// Generate one image per validation layout for each strategy, score layout
/// fidelity with the fixed detector, and fit the feature-Fréchet distance
/// against the real images.
pub fn eval_fidelity(
    cfg: &RunConfig,
    diffusion: &ParamStore,
    detector: &GridDetector,
    val_scenes: &[Scene],
    val_attrs: &[Vec<PerceptionAttribute>],
    seed: u64,
) -> Result<FidelityReport> {
    if val_scenes.is_empty() {
        return Err(Error::Pipeline("fidelity needs validation scenes".into()));
    }
    if val_attrs.len() != val_scenes.len() {
        return Err(Error::Pipeline(format!(
            "{} attribute rows for {} validation scenes",
            val_attrs.len(),
            val_scenes.len()
        )));
    }
    let n = if cfg.fidelity.images == 0 {
        val_scenes.len()
    } else {
        cfg.fidelity.images.min(val_scenes.len())
    };
    if n < 2 {
        return Err(Error::Pipeline("fidelity needs at least 2 images per side".into()));
    }
    let scenes = &val_scenes[..n];
    let attrs = &val_attrs[..n];
    let vocab = cfg.vocabulary()?;
    let sched = cfg.build_schedule()?;
    let unet = UNet::new(cfg.unet_config())?;
    let size = cfg.scene.generator.image_size;
    let gts: Vec<Vec<crate::detector::GtBox>> = scenes.iter().map(gt_boxes).collect();
    let real_images: Vec<&Image> = scenes.iter().map(|s| &s.image).collect();
    let real_feats = features_of(detector, &real_images)?;

    let mut rows = Vec::with_capacity(4);
    let real_map = score(
        detector,
        &real_images,
        &gts,
        cfg.detector.eval_conf,
        cfg.detector.nms_iou,
    )?;
    rows.push(FidelityArm {
        arm: "real".into(),
        images: n,
        map: real_map.map,
        ap50: real_map.ap50,
        ap75: real_map.ap75,
        ffd: frechet::feature_frechet_distance(&real_feats, &real_feats)?,
    });

    for (si, strategy) in
        [AttributeStrategy::Origin, AttributeStrategy::Easy, AttributeStrategy::Hard]
            .iter()
            .enumerate()
    {
        let layouts: Result<Vec<_>> = scenes
            .iter()
            .zip(attrs)
            .map(|(s, a)| scene_layout(s, a, &vocab, *strategy))
            .collect();
        let layouts = layouts?;
        let sampler = Sampler {
            unet: &unet,
            store: diffusion,
            sched: &sched,
            image_size: size,
            ddim_steps: cfg.sample.steps,
            cfg_scale: cfg.sample.cfg_scale,
        };
        let strat_seed = crate::rng::stream(seed, "fidelity-arm", si as u64).gen::<u64>();
        let images = sampler.sample_set(&layouts, &vocab, strat_seed)?;
        let image_refs: Vec<&Image> = images.iter().collect();
        let map = score(detector, &image_refs, &gts, cfg.detector.eval_conf, cfg.detector.nms_iou)?;
        let gen_feats = features_of(detector, &image_refs)?;
        rows.push(FidelityArm {
            arm: strategy.as_str().to_string(),
            images: n,
            map: map.map,
            ap50: map.ap50,
            ap75: map.ap75,
            ffd: frechet::feature_frechet_distance(&real_feats, &gen_feats)?,
        });
    }

    Ok(FidelityReport { rows, seed, config_hash: cfg.hash() })
}
