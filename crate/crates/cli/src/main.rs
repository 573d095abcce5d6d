//! `pdiff`: drives the full pipeline from one TOML config. Subcommands run
//! the stages in order: gen-data, train-detector, extract-attr,
//! train-diffusion, sample, eval-fidelity, eval-trainability, report.
//!
//! Every subcommand takes `--config <FILE>` plus an optional `--seed` that
//! overrides the config's base seed. `--threads` (or `PDIFF_THREADS`) sets
//! the worker pool; failures exit nonzero with a one-line `error: ...`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rayon::prelude::*;

use pdiff_core::denoiser::UNet;
use pdiff_core::detector::{
    evaluate_on, map::write_map_csv, train_detector, GridDetector, COCO_THRESHOLDS,
};
use pdiff_core::pa_attr::{attribute_records, read_attr_jsonl, write_attr_jsonl, AttrRecord};
use pdiff_core::pipeline::{
    attrs_by_scene, eval_fidelity, eval_trainability, load_diffusion_store, scene_layout,
    train_diffusion, write_fidelity, write_report, write_trainability, RunConfig, Sampler,
};
use pdiff_core::scenegen::{dataset, generate_scene, BBox, Category, Scene};
use pdiff_core::{rng, Error, Result};

#[derive(Parser)]
#[command(name = "pdiff", version, about = "Layout-to-image diffusion pipeline driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and validation datasets.
    GenData(Common),
    /// Train the grid detector on real scenes and score it on validation.
    TrainDetector(Common),
    /// Run the detector over both splits and write attribute dumps.
    ExtractAttr(Common),
    /// Train the conditional diffusion model on scenes + attributes.
    TrainDiffusion(Common),
    /// Draw one image per validation layout with the configured strategy.
    Sample(Common),
    /// Score generated images against their layouts (mAP + feature distance).
    EvalFidelity(Common),
    /// Train real/real+generated detector arms and compare on held-out data.
    EvalTrainability(Common),
    /// Aggregate all artifacts under the workdir into the final report.
    Report(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::TrainDetector(c)
            | Command::ExtractAttr(c)
            | Command::TrainDiffusion(c)
            | Command::Sample(c)
            | Command::EvalFidelity(c)
            | Command::EvalTrainability(c)
            | Command::Report(c) => c,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Run configuration file (TOML, unknown keys rejected).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the config's base seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads; overrides PDIFF_THREADS. 1 guarantees bit-exact runs.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: &Command) -> Result<String> {
    let common = command.common();
    init_threads(common.threads)?;
    let cfg = RunConfig::load(&common.config)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    match command {
        Command::GenData(_) => cmd_gen_data(&cfg, seed),
        Command::TrainDetector(_) => cmd_train_detector(&cfg, seed),
        Command::ExtractAttr(_) => cmd_extract_attr(&cfg),
        Command::TrainDiffusion(_) => cmd_train_diffusion(&cfg, seed),
        Command::Sample(_) => cmd_sample(&cfg, seed),
        Command::EvalFidelity(_) => cmd_eval_fidelity(&cfg, seed),
        Command::EvalTrainability(_) => cmd_eval_trainability(&cfg, seed),
        Command::Report(_) => cmd_report(&cfg, seed),
    }
}

/// Pool size: explicit flag, then PDIFF_THREADS, then rayon's default.
fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("PDIFF_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                Error::Pipeline(format!("PDIFF_THREADS must be a positive integer, got `{v}`"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Pipeline("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Pipeline(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn gen_scenes(cfg: &RunConfig, seed: u64, domain: &str, n: usize) -> Result<Vec<Scene>> {
    (0..n)
        .map(|i| {
            let scene_seed: u64 = rng::stream(seed, domain, i as u64).gen();
            generate_scene(scene_seed, &cfg.scene.generator)
        })
        .collect()
}

fn cmd_gen_data(cfg: &RunConfig, seed: u64) -> Result<String> {
    let paths = cfg.paths();
    let train = gen_scenes(cfg, seed, "gen-train", cfg.scene.train_scenes)?;
    let val = gen_scenes(cfg, seed, "gen-val", cfg.scene.val_scenes)?;
    dataset::write_dataset(&train, &paths.train_data())?;
    dataset::write_dataset(&val, &paths.val_data())?;
    Ok(format!(
        "gen-data: {} train + {} val scenes -> {}",
        train.len(),
        val.len(),
        paths.workdir.display()
    ))
}

fn cmd_train_detector(cfg: &RunConfig, seed: u64) -> Result<String> {
    let paths = cfg.paths();
    let train_scenes = dataset::read_dataset(&paths.train_data())?;
    let val_scenes = dataset::read_dataset(&paths.val_data())?;
    let mut model = GridDetector::new(cfg.detector_arch(), seed)?;
    let tcfg = cfg.detector_train_config(seed);
    let log = train_detector(&mut model, &train_scenes, &tcfg)?;
    model.save(&paths.detector())?;
    let report = evaluate_on(
        &model,
        &val_scenes,
        cfg.detector.eval_conf,
        cfg.detector.nms_iou,
        &COCO_THRESHOLDS,
    )?;
    write_map_csv(&report, &paths.detector_map_csv())?;
    Ok(format!(
        "train-detector: {} steps, final loss {:.4}, val mAP {:.4} -> {}",
        tcfg.steps,
        log.losses.last().copied().unwrap_or(f32::NAN),
        report.map,
        paths.detector().display()
    ))
}

fn cmd_extract_attr(cfg: &RunConfig) -> Result<String> {
    let paths = cfg.paths();
    let model = GridDetector::load(&paths.detector())?;
    let splits = [
        (paths.train_data(), paths.attr_train()),
        (paths.val_data(), paths.attr_val()),
    ];
    let mut counts = [0usize; 2];
    for (k, (data_dir, out)) in splits.iter().enumerate() {
        let scenes = dataset::read_dataset(data_dir)?;
        let per_scene: Result<Vec<Vec<AttrRecord>>> = scenes
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let dets = model.detect(&s.image, cfg.detector.eval_conf, cfg.detector.nms_iou)?;
                let gts: Vec<(Category, BBox)> =
                    s.objects.iter().map(|o| (o.category, o.bbox)).collect();
                attribute_records(i, &gts, &dets, &cfg.attr, &Category::ALL)
            })
            .collect();
        let records: Vec<AttrRecord> = per_scene?.into_iter().flatten().collect();
        counts[k] = records.len();
        write_attr_jsonl(&records, out)?;
    }
    Ok(format!(
        "extract-attr: {} train + {} val records -> {}, {}",
        counts[0],
        counts[1],
        paths.attr_train().display(),
        paths.attr_val().display()
    ))
}

fn cmd_train_diffusion(cfg: &RunConfig, seed: u64) -> Result<String> {
    let paths = cfg.paths();
    let scenes = dataset::read_dataset(&paths.train_data())?;
    let records = read_attr_jsonl(&paths.attr_train())?;
    let attrs = attrs_by_scene(&records, &scenes)?;
    let summary = train_diffusion(cfg, &scenes, &attrs, seed)?;
    Ok(format!(
        "train-diffusion: {} steps, ldm {:.4} -> {:.4}, checkpoint {}",
        summary.steps,
        summary.first_ldm,
        summary.last_ldm,
        summary.checkpoint.display()
    ))
}

fn cmd_sample(cfg: &RunConfig, seed: u64) -> Result<String> {
    let paths = cfg.paths();
    let scenes = dataset::read_dataset(&paths.val_data())?;
    let records = read_attr_jsonl(&paths.attr_val())?;
    let attrs = attrs_by_scene(&records, &scenes)?;
    let store = load_diffusion_store(&paths.diffusion(), cfg)?;
    let unet = UNet::new(cfg.unet_config())?;
    let sched = cfg.build_schedule()?;
    let vocab = cfg.vocabulary()?;
    let strategy = cfg.sample.strategy;
    let layouts = scenes
        .iter()
        .zip(&attrs)
        .map(|(s, a)| scene_layout(s, a, &vocab, strategy))
        .collect::<Result<Vec<_>>>()?;
    let sampler = Sampler {
        unet: &unet,
        store: &store,
        sched: &sched,
        image_size: cfg.scene.generator.image_size,
        ddim_steps: cfg.sample.steps,
        cfg_scale: cfg.sample.cfg_scale,
    };
    let images = sampler.sample_set(&layouts, &vocab, seed)?;
    let dir = paths.samples_dir(strategy);
    for (i, im) in images.iter().enumerate() {
        dataset::write_png(im, &dir.join(format!("sample_{i:05}.png")))?;
    }
    Ok(format!(
        "sample: {} images (strategy {}, cfg {}) -> {}",
        images.len(),
        strategy.as_str(),
        cfg.sample.cfg_scale,
        dir.display()
    ))
}

fn cmd_eval_fidelity(cfg: &RunConfig, seed: u64) -> Result<String> {
    let paths = cfg.paths();
    let detector = GridDetector::load(&paths.detector())?;
    let store = load_diffusion_store(&paths.diffusion(), cfg)?;
    let val_scenes = dataset::read_dataset(&paths.val_data())?;
    let records = read_attr_jsonl(&paths.attr_val())?;
    let attrs = attrs_by_scene(&records, &val_scenes)?;
    let report = eval_fidelity(cfg, &store, &detector, &val_scenes, &attrs, seed)?;
    write_fidelity(&report, &paths)?;
    let rows: Vec<String> =
        report.rows.iter().map(|r| format!("{} mAP {:.4}", r.arm, r.map)).collect();
    Ok(format!("eval-fidelity: {} -> {}", rows.join(", "), paths.fidelity_csv().display()))
}

fn cmd_eval_trainability(cfg: &RunConfig, seed: u64) -> Result<String> {
    let paths = cfg.paths();
    let store = load_diffusion_store(&paths.diffusion(), cfg)?;
    let train_scenes = dataset::read_dataset(&paths.train_data())?;
    let records = read_attr_jsonl(&paths.attr_train())?;
    let train_attrs = attrs_by_scene(&records, &train_scenes)?;
    let val_scenes = dataset::read_dataset(&paths.val_data())?;
    let report = eval_trainability(cfg, &store, &train_scenes, &train_attrs, &val_scenes, seed)?;
    write_trainability(&report, &paths)?;
    let rows: Vec<String> =
        report.rows.iter().map(|r| format!("{} mAP {:.4}", r.arm, r.map)).collect();
    Ok(format!("eval-trainability: {} -> {}", rows.join(", "), paths.trainability_csv().display()))
}

fn cmd_report(cfg: &RunConfig, seed: u64) -> Result<String> {
    let paths = cfg.paths();
    write_report(&paths, &cfg.hash(), seed)?;
    Ok(format!("report: -> {}", paths.report_txt().display()))
}
