//! Diffusion training with CFG null-condition dropout and the perception
//! loss. Single-stream and bit-deterministic for a fixed (config, seed).

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::adam::{warmup_cosine_lr, Adam, AdamConfig};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::Archive;
use crate::conditioning::{
    init_cond_params, layout_condition, null_condition, ConditionTokens,
};
use crate::denoiser::UNet;
use crate::error::{Error, Result};
use crate::pa_attr::{AttributeStrategy, PerceptionAttribute};
use crate::pa_loss::{
    dice_loss, fuse_features, init_seg_params, mask_loss, mask_targets, perception_loss, seg_head,
    total_loss,
};
use crate::params::{BoundParams, Grads, ParamStore};
use crate::pipeline::{gt_masks, scene_layout, RunConfig};
use crate::rng::stream;
use crate::scenegen::Scene;

pub const ARCH_META: &str = "meta/diffusion-arch";

/// Fresh parameter store with condition encoder, UNet, and seg head.
pub fn init_diffusion_store(cfg: &RunConfig, seed: u64) -> Result<ParamStore> {
    let vocab = cfg.vocabulary()?;
    let unet = UNet::new(cfg.unet_config())?;
    let mut store = ParamStore::new();
    init_cond_params(&mut store, &vocab, cfg.model.cond_dim, seed)?;
    unet.init_params(&mut store, seed)?;
    init_seg_params(
        &mut store,
        cfg.model.base_channels,
        cfg.model.cond_dim,
        cfg.model.feat_channels,
        seed,
    )?;
    Ok(store)
}

fn arch_meta(cfg: &RunConfig) -> Vec<f32> {
    vec![
        cfg.model.base_channels as f32,
        cfg.model.cond_dim as f32,
        cfg.model.temb_dim as f32,
        cfg.model.feat_channels as f32,
        cfg.model.location_bins as f32,
        cfg.scene.generator.image_size as f32,
        cfg.schedule.steps as f32,
    ]
}

/// Serialize the store plus an architecture descriptor.
pub fn write_diffusion_checkpoint(
    store: &ParamStore,
    cfg: &RunConfig,
    path: &Path,
) -> Result<()> {
    let mut archive = Archive::from_store(store);
    let meta = arch_meta(cfg);
    let n = meta.len();
    archive.push(ARCH_META, &[n], meta);
    archive.write(path)
}

/// Load a checkpoint and verify its architecture matches `cfg`.
pub fn load_diffusion_store(path: &Path, cfg: &RunConfig) -> Result<ParamStore> {
    let archive = Archive::read(path)?;
    let fail = |msg: String| Error::Checkpoint { path: path.display().to_string(), msg };
    let meta = archive
        .entries
        .iter()
        .find(|e| e.name == ARCH_META)
        .ok_or_else(|| fail(format!("missing {ARCH_META} entry")))?;
    let want = arch_meta(cfg);
    if meta.values != want {
        return Err(fail(format!(
            "architecture mismatch: checkpoint {:?}, config {:?}",
            meta.values, want
        )));
    }
    let mut store = ParamStore::new();
    for e in &archive.entries {
        if e.name.starts_with("meta/") {
            continue;
        }
        store.add(&e.name, e.values.clone(), &e.shape)?;
    }
    Ok(store)
}

/// Per-step log row and end-of-run summary.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    /// Mean LDM loss over the first five steps.
    pub first_ldm: f32,
    /// Mean LDM loss over the last `min(20, steps)` steps.
    pub last_ldm: f32,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub config_hash: String,
}

struct ItemLosses {
    total: Var,
    ldm: f32,
    mask: Option<f32>,
    dice: Option<f32>,
    perception: Option<f32>,
}

/// Train the diffusion model on `scenes` with stored attributes, writing the
/// loss CSV and checkpoints under the config's workdir.
pub fn train_diffusion(
    cfg: &RunConfig,
    scenes: &[Scene],
    attrs: &[Vec<PerceptionAttribute>],
    seed: u64,
) -> Result<TrainSummary> {
    if scenes.is_empty() {
        return Err(Error::Pipeline("diffusion training dataset is empty".into()));
    }
    if attrs.len() != scenes.len() {
        return Err(Error::Pipeline(format!(
            "{} attribute rows for {} scenes",
            attrs.len(),
            scenes.len()
        )));
    }
    let size = cfg.scene.generator.image_size;
    for s in scenes {
        if s.image.h != size || s.image.w != size {
            return Err(Error::Pipeline(format!(
                "scene image {}x{} does not match configured size {size}",
                s.image.h, s.image.w
            )));
        }
    }
    let paths = cfg.paths();
    std::fs::create_dir_all(&paths.workdir)?;
    let vocab = cfg.vocabulary()?;
    let unet = UNet::new(cfg.unet_config())?;
    let sched = cfg.build_schedule()?;
    let mut store = init_diffusion_store(cfg, seed)?;

    // Cached per-scene inputs: normalized pixels, condition tokens (origin
    // strategy: the stored attributes), and mask rows for the seg head.
    let chw: Vec<Vec<f32>> = scenes.iter().map(|s| s.image.to_chw_norm()).collect();
    let mut layouts = Vec::with_capacity(scenes.len());
    let mut tokens: Vec<ConditionTokens> = Vec::with_capacity(scenes.len());
    let mut masks: Vec<Vec<Vec<f32>>> = Vec::with_capacity(scenes.len());
    for (s, a) in scenes.iter().zip(attrs) {
        let layout = scene_layout(s, a, &vocab, AttributeStrategy::Origin)?;
        tokens.push(layout_condition(&layout, &vocab)?);
        layouts.push(layout);
        masks.push(gt_masks(s));
    }
    let null = null_condition(&vocab);

    let tcfg = &cfg.train;
    let t_max = sched.steps();
    let mut adam = Adam::new(&store);
    let mut csv = String::from("step,lr,ldm,mask,dice,perception,total\n");
    let mut ldm_history = Vec::with_capacity(tcfg.steps);
    if tcfg.checkpoint_every > 0 {
        std::fs::create_dir_all(paths.checkpoints_dir())?;
    }

    for step in 0..tcfg.steps {
        let mut rng = stream(seed, "diffusion-batch", step as u64);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store)?;
        let mut batch: Vec<ItemLosses> = Vec::with_capacity(tcfg.batch_size);
        let run_step = (|| -> Result<f32> {
            for _ in 0..tcfg.batch_size {
                let i = rng.gen_range(0..scenes.len());
                let t = rng.gen_range(1..=t_max);
                let is_null = rng.gen_bool(tcfg.null_prob);
                let eps: Vec<f32> =
                    (0..3 * size * size).map(|_| rng.sample(StandardNormal)).collect();
                let z_t = sched.add_noise(&chw[i], &eps, t)?;
                let z_var = tape.leaf(z_t, &[1, 3, size, size])?;
                let eps_leaf = tape.leaf(eps, &[1, 3, size, size])?;
                let cond = if is_null { &null } else { &tokens[i] };
                let out = unet.forward(&mut tape, &store, &bound, z_var, t, cond)?;
                let ldm = tape.mse(out.eps_hat, eps_leaf)?;
                let item = if is_null {
                    ItemLosses {
                        total: ldm,
                        ldm: tape.scalar(ldm)?,
                        mask: None,
                        dice: None,
                        perception: None,
                    }
                } else {
                    let fused = fuse_features(&mut tape, &store, &bound, &out.taps)?;
                    let pred = seg_head(&mut tape, &store, &bound, fused, &layouts[i], &vocab)?;
                    let targets = mask_targets(&mut tape, &pred, &masks[i])?;
                    let ml = mask_loss(&mut tape, &pred, targets)?;
                    let dl = if cfg.loss.use_dice {
                        Some(dice_loss(&mut tape, &pred, targets, cfg.loss.dice_eps)?)
                    } else {
                        None
                    };
                    let p =
                        perception_loss(&mut tape, ml, dl, t, &sched, cfg.loss.timestep_scale)?;
                    let total = total_loss(&mut tape, ldm, p, cfg.loss.lambda)?;
                    ItemLosses {
                        total,
                        ldm: tape.scalar(ldm)?,
                        mask: Some(tape.scalar(ml)?),
                        dice: dl.map(|v| tape.scalar(v)).transpose()?,
                        perception: Some(tape.scalar(p)?),
                    }
                };
                batch.push(item);
            }
            let mut acc = batch[0].total;
            for item in &batch[1..] {
                acc = tape.add(acc, item.total)?;
            }
            let mean = tape.scale(acc, 1.0 / tcfg.batch_size as f32)?;
            let loss = tape.scalar(mean)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            tape.backward(mean)?;
            Ok(loss)
        })();
        let loss = match run_step {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step }),
            Err(e) => return Err(e),
        };

        let mut grads = Grads::new(&store);
        bound.harvest(&mut tape, &mut grads);
        drop(tape);
        let lr = warmup_cosine_lr(tcfg.lr, tcfg.warmup, tcfg.steps, step);
        let adam_cfg = AdamConfig { lr, weight_decay: tcfg.weight_decay, ..Default::default() };
        adam.step(&mut store, &grads, &adam_cfg)?;

        let b = tcfg.batch_size as f32;
        let ldm_mean = batch.iter().map(|x| x.ldm).sum::<f32>() / b;
        let seg_mean = |f: fn(&ItemLosses) -> Option<f32>| -> f32 {
            let vals: Vec<f32> = batch.iter().filter_map(f).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f32>() / vals.len() as f32
            }
        };
        let mask_mean = seg_mean(|x| x.mask);
        let dice_mean = seg_mean(|x| x.dice);
        let p_mean = seg_mean(|x| x.perception);
        csv.push_str(&format!(
            "{step},{lr},{ldm_mean},{mask_mean},{dice_mean},{p_mean},{loss}\n"
        ));
        ldm_history.push(ldm_mean);

        if tcfg.checkpoint_every > 0 && (step + 1) % tcfg.checkpoint_every == 0 {
            let p = paths.checkpoints_dir().join(format!("step_{:06}.pdck", step + 1));
            write_diffusion_checkpoint(&store, cfg, &p)?;
        }
    }

    std::fs::write(paths.loss_csv(), csv.as_bytes())?;
    write_diffusion_checkpoint(&store, cfg, &paths.diffusion())?;
    let head = ldm_history.iter().take(5).copied();
    let first_ldm = head.clone().sum::<f32>() / head.len().max(1) as f32;
    let tail_n = ldm_history.len().min(20);
    let last_ldm =
        ldm_history[ldm_history.len() - tail_n..].iter().sum::<f32>() / tail_n.max(1) as f32;
    Ok(TrainSummary {
        steps: tcfg.steps,
        first_ldm,
        last_ldm,
        checkpoint: paths.diffusion(),
        loss_csv: paths.loss_csv(),
        config_hash: cfg.hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, SceneConfig};

    fn micro_config(dir: &Path, steps: usize) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.workdir = dir.to_path_buf();
        cfg.scene.generator = SceneConfig {
            image_size: 16,
            min_objects: 1,
            max_objects: 2,
            max_occlusion: 0.0,
            ..Default::default()
        };
        cfg.model.base_channels = 8;
        cfg.model.cond_dim = 16;
        cfg.model.temb_dim = 16;
        cfg.model.feat_channels = 8;
        cfg.model.location_bins = 4;
        cfg.schedule.steps = 100;
        cfg.train.steps = steps;
        cfg.train.batch_size = 2;
        cfg.train.lr = 2e-3;
        cfg.train.warmup = 10;
        cfg.sample.steps = 10;
        cfg.trainability.sample_steps = 10;
        cfg.validate().unwrap();
        cfg
    }

    fn micro_dataset(cfg: &RunConfig, n: usize) -> (Vec<Scene>, Vec<Vec<PerceptionAttribute>>) {
        let scenes: Vec<Scene> =
            (0..n).map(|i| generate_scene(1000 + i as u64, &cfg.scene.generator).unwrap()).collect();
        let attrs = scenes
            .iter()
            .map(|s| vec![PerceptionAttribute::Easy; s.objects.len()])
            .collect();
        (scenes, attrs)
    }

    #[test]
    fn overfit_run_drops_ldm_below_quarter_of_start() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path(), 500);
        let (scenes, attrs) = micro_dataset(&cfg, 20);
        let summary = train_diffusion(&cfg, &scenes, &attrs, 0).unwrap();
        assert!(
            summary.last_ldm < 0.25 * summary.first_ldm,
            "ldm {} -> {} did not reach 25%",
            summary.first_ldm,
            summary.last_ldm
        );
        assert!(summary.checkpoint.exists());
        assert!(summary.loss_csv.exists());
    }

    #[test]
    fn lambda_zero_total_equals_ldm_exactly_and_logs_perception() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_config(dir.path(), 12);
        cfg.loss.lambda = 0.0;
        cfg.train.null_prob = 0.0;
        let (scenes, attrs) = micro_dataset(&cfg, 4);
        train_diffusion(&cfg, &scenes, &attrs, 3).unwrap();
        let csv = std::fs::read_to_string(cfg.paths().loss_csv()).unwrap();
        let mut rows = 0;
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 7);
            let ldm: f32 = cols[2].parse().unwrap();
            let p: f32 = cols[5].parse().unwrap();
            let total: f32 = cols[6].parse().unwrap();
            assert_eq!(total, ldm, "row {rows}: total != ldm under lambda=0");
            assert!(p > 0.0, "perception loss should still be logged");
            rows += 1;
        }
        assert_eq!(rows, 12);
    }

    #[test]
    fn identical_config_and_seed_reproduce_csv_and_checkpoint_bytes() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let (scenes, attrs) = {
            let cfg = micro_config(dir_a.path(), 30);
            micro_dataset(&cfg, 6)
        };
        let run = |dir: &Path| {
            let cfg = micro_config(dir, 30);
            train_diffusion(&cfg, &scenes, &attrs, 7).unwrap();
            let csv = std::fs::read(cfg.paths().loss_csv()).unwrap();
            let ckpt = std::fs::read(cfg.paths().diffusion()).unwrap();
            (csv, ckpt)
        };
        let (csv_a, ckpt_a) = run(dir_a.path());
        let (csv_b, ckpt_b) = run(dir_b.path());
        assert_eq!(csv_a, csv_b);
        assert_eq!(ckpt_a, ckpt_b);
    }

    #[test]
    fn divergence_aborts_with_step_index() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_config(dir.path(), 40);
        cfg.train.lr = 1e30;
        cfg.train.warmup = 0;
        let (scenes, attrs) = micro_dataset(&cfg, 4);
        let err = train_diffusion(&cfg, &scenes, &attrs, 1).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "got {err}");
    }

    #[test]
    fn checkpoint_roundtrip_verifies_arch_meta() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path(), 1);
        let store = init_diffusion_store(&cfg, 5).unwrap();
        let p = dir.path().join("model.pdck");
        write_diffusion_checkpoint(&store, &cfg, &p).unwrap();
        let back = load_diffusion_store(&p, &cfg).unwrap();
        assert_eq!(back.num_scalars(), store.num_scalars());
        for id in store.ids() {
            let name = store.name(id);
            let rid = back.id(name).expect("name preserved");
            assert_eq!(back.values(rid), store.values(id), "{name}");
        }
        // A config with a different architecture is rejected.
        let mut other = cfg.clone();
        other.model.base_channels = 16;
        let err = match load_diffusion_store(&p, &other) {
            Ok(_) => panic!("arch mismatch accepted"),
            Err(e) => e,
        };
        assert!(err.to_string().contains("mismatch"), "{err}");
    }

    #[test]
    fn periodic_checkpoints_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_config(dir.path(), 9);
        cfg.train.checkpoint_every = 4;
        let (scenes, attrs) = micro_dataset(&cfg, 3);
        train_diffusion(&cfg, &scenes, &attrs, 2).unwrap();
        let ckpts = cfg.paths().checkpoints_dir();
        assert!(ckpts.join("step_000004.pdck").exists());
        assert!(ckpts.join("step_000008.pdck").exists());
        assert!(!ckpts.join("step_000012.pdck").exists());
    }
}
