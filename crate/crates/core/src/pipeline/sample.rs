//! Deterministic DDIM sampling with classifier-free guidance.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::conditioning::{layout_condition, null_condition, AnnotatedLayout, ConditionTokens};
use crate::denoiser::UNet;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::rng::stream;
use crate::scenegen::Image;
use crate::schedule::Schedule;

/// Classifier-free guidance: `(1-s)*eps_null + s*eps_cond`.
///
/// Written in barycentric form so s=0 and s=1 reproduce the inputs exactly
/// and s in (0,1) stays elementwise between them.
pub fn cfg_combine(eps_null: &[f32], eps_cond: &[f32], scale: f32) -> Vec<f32> {
    debug_assert_eq!(eps_null.len(), eps_cond.len());
    eps_null
        .iter()
        .zip(eps_cond)
        .map(|(n, c)| (1.0 - scale) * n + scale * c)
        .collect()
}

/// Everything needed to draw images from a trained model.
pub struct Sampler<'a> {
    pub unet: &'a UNet,
    pub store: &'a ParamStore,
    pub sched: &'a Schedule,
    pub image_size: usize,
    pub ddim_steps: usize,
    pub cfg_scale: f32,
}

impl<'a> Sampler<'a> {
    fn eps_for(
        &self,
        z: &[f32],
        t: usize,
        cond: &ConditionTokens,
        null: &ConditionTokens,
    ) -> Result<Vec<f32>> {
        let s = self.image_size;
        let mut tape = Tape::new();
        let bound = BoundParams::bind_frozen(&mut tape, self.store)?;
        let zv = tape.leaf(z.to_vec(), &[1, 3, s, s])?;
        // Skip whichever branch the guidance weight zeroes out.
        let eps_cond = if self.cfg_scale != 0.0 {
            Some(
                self.unet
                    .forward(&mut tape, self.store, &bound, zv, t, cond)?
                    .eps_hat,
            )
        } else {
            None
        };
        let eps_null = if self.cfg_scale != 1.0 {
            Some(
                self.unet
                    .forward(&mut tape, self.store, &bound, zv, t, null)?
                    .eps_hat,
            )
        } else {
            None
        };
        Ok(match (eps_null, eps_cond) {
            (Some(n), Some(c)) => cfg_combine(tape.values(n), tape.values(c), self.cfg_scale),
            (None, Some(c)) => tape.values(c).to_vec(),
            (Some(n), None) => tape.values(n).to_vec(),
            (None, None) => unreachable!(),
        })
    }

    /// Draw one image for a layout. The trajectory is deterministic given
    /// `(seed, index, layout, cfg_scale, ddim_steps)`.
    pub fn sample_image(
        &self,
        layout: &AnnotatedLayout,
        vocab: &crate::conditioning::Vocabulary,
        seed: u64,
        index: u64,
    ) -> Result<Image> {
        if self.ddim_steps > self.sched.steps() {
            return Err(Error::Schedule(format!(
                "{} sampling steps for a {}-step schedule",
                self.ddim_steps,
                self.sched.steps()
            )));
        }
        let cond = layout_condition(layout, vocab)?;
        let null = null_condition(vocab);
        let s = self.image_size;
        let mut rng = stream(seed, "sample-noise", index);
        let mut z: Vec<f32> = (0..3 * s * s).map(|_| rng.sample(StandardNormal)).collect();
        let ts = self.sched.ddim_timesteps(self.ddim_steps)?;
        for w in ts.windows(2) {
            let eps = self.eps_for(&z, w[0], &cond, &null)?;
            z = self.sched.ddim_step(&z, &eps, w[0], w[1])?;
        }
        let t_last = *ts.last().expect("nonempty timesteps");
        let eps = self.eps_for(&z, t_last, &cond, &null)?;
        let z0 = self.sched.ddim_z0_hat(&z, &eps, t_last)?;
        Ok(Image::from_chw_norm(s, s, &z0))
    }

    /// Sample one image per layout, parallel across images with per-image
    /// noise streams; output order matches input order.
    pub fn sample_set(
        &self,
        layouts: &[AnnotatedLayout],
        vocab: &crate::conditioning::Vocabulary,
        seed: u64,
    ) -> Result<Vec<Image>> {
        layouts
            .par_iter()
            .enumerate()
            .map(|(i, l)| self.sample_image(l, vocab, seed, i as u64))
            .collect()
    }
}
