use pdiff_core::conditioning::{layout_condition, null_condition, Vocabulary};
use pdiff_core::denoiser::UNet;
use pdiff_core::pa_attr::AttributeStrategy;
use pdiff_core::pipeline::{attrs_by_scene, cfg_combine, load_diffusion_store, scene_layout, RunConfig};
use pdiff_core::scenegen::dataset::{read_dataset, write_png};
use pdiff_core::scenegen::Image;
use pdiff_core::schedule::Schedule;
use pdiff_core::{BoundParams, Tape};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

fn eps_for(
    unet: &UNet,
    store: &pdiff_core::ParamStore,
    s: usize,
    z: &[f32],
    t: usize,
    cond: &pdiff_core::conditioning::ConditionTokens,
    null: &pdiff_core::conditioning::ConditionTokens,
    scale: f32,
) -> Vec<f32> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind_frozen(&mut tape, store).unwrap();
    let zv = tape.leaf(z.to_vec(), &[1, 3, s, s]).unwrap();
    let c = unet.forward(&mut tape, store, &bound, zv, t, cond).unwrap().eps_hat;
    let n = unet.forward(&mut tape, store, &bound, zv, t, null).unwrap().eps_hat;
    cfg_combine(tape.values(n), tape.values(c), scale)
}

#[test]
#[ignore]
fn probe_trajectory() {
    let cfg = RunConfig::load(std::path::Path::new("/tmp/pilot2/run.toml")).unwrap();
    let store =
        load_diffusion_store(std::path::Path::new("/tmp/pilot2/run/diffusion.pdck"), &cfg)
            .unwrap();
    let unet = UNet::new(cfg.unet_config()).unwrap();
    let sched: Schedule = cfg.build_schedule().unwrap();
    let vocab: Vocabulary = cfg.vocabulary().unwrap();
    let val = read_dataset(std::path::Path::new("/tmp/pilot2/run/data/val")).unwrap();
    let records = pdiff_core::pa_attr::read_attr_jsonl(std::path::Path::new(
        "/tmp/pilot2/run/attr_val.jsonl",
    ))
    .unwrap();
    let attrs = attrs_by_scene(&records, &val).unwrap();
    let s = cfg.scene.generator.image_size;
    let scene = &val[0];
    let layout = scene_layout(scene, &attrs[0], &vocab, AttributeStrategy::Origin).unwrap();
    let cond = layout_condition(&layout, &vocab).unwrap();
    let null = null_condition(&vocab);
    let scale = 1.0f32;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let mut z: Vec<f32> = (0..3 * s * s).map(|_| rng.sample(StandardNormal)).collect();
    let ts = sched.ddim_timesteps(25).unwrap();
    for (i, w) in ts.windows(2).enumerate() {
        let eps = eps_for(&unet, &store, s, &z, w[0], &cond, &null, scale);
        let z0h = sched.ddim_z0_hat(&z, &eps, w[0]).unwrap();
        let zmax = z.iter().fold(0f32, |m, x| m.max(x.abs()));
        let emax = eps.iter().fold(0f32, |m, x| m.max(x.abs()));
        let sat = z0h.iter().filter(|x| x.abs() >= 0.999).count() as f32 / z0h.len() as f32;
        println!(
            "step {i:2} t {:3} -> {:3}  |z|max {zmax:6.2}  |eps|max {emax:6.2}  z0hat sat {:.0}%",
            w[0],
            w[1],
            100.0 * sat
        );
        if i % 4 == 0 || i == 23 {
            write_png(
                &Image::from_chw_norm(s, s, &z0h),
                std::path::Path::new(&format!("/tmp/pilot2/probe/traj_z0h_{i:02}.png")),
            )
            .unwrap();
        }
        z = sched.ddim_step(&z, &eps, w[0], w[1]).unwrap();
    }
    let t_last = *ts.last().unwrap();
    let eps = eps_for(&unet, &store, s, &z, t_last, &cond, &null, scale);
    let z0 = sched.ddim_z0_hat(&z, &eps, t_last).unwrap();
    write_png(
        &Image::from_chw_norm(s, s, &z0),
        std::path::Path::new("/tmp/pilot2/probe/traj_final.png"),
    )
    .unwrap();
    write_png(&scene.image, std::path::Path::new("/tmp/pilot2/probe/traj_real.png")).unwrap();
}
