//! DDPM noise schedule and the deterministic DDIM update.
//!
//! Timesteps are 1-based: `t = 0` is the clean image, so `alpha_bar(0) = 1`
//! and valid noising steps are `1..=T`. Tables are kept in f64 and cast to
//! f32 only where coefficients meet image tensors.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Schedule {
    /// `beta[t]` for `t in 1..=T`; index 0 is unused and holds 0.
    beta: Vec<f64>,
    /// `alpha_bar[t] = prod_{s<=t} (1 - beta_s)`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

impl Schedule {
    /// Linear beta ramp from `beta_start` to `beta_end` over `t_steps` steps.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::Schedule("schedule needs at least 1 step".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::Schedule(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut beta = vec![0.0; t_steps + 1];
        let mut alpha_bar = vec![1.0; t_steps + 1];
        for t in 1..=t_steps {
            beta[t] = if t_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (t - 1) as f64 / (t_steps - 1) as f64
            };
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
        }
        Ok(Self { beta, alpha_bar })
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    /// `beta_t`, valid for `t in 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        debug_assert!((1..=self.steps()).contains(&t));
        self.beta[t]
    }

    /// `alpha_t = 1 - beta_t`.
    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Cumulative product, valid for `t in 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Perception-loss weight `sqrt(alpha_bar_t)`.
    pub fn loss_scale(&self, t: usize) -> f64 {
        self.alpha_bar(t).sqrt()
    }

    /// Forward noising `z_t = sqrt(ab)·z0 + sqrt(1-ab)·eps`.
    pub fn add_noise(&self, z0: &[f32], eps: &[f32], t: usize) -> Result<Vec<f32>> {
        self.check_t(t)?;
        if z0.len() != eps.len() {
            return Err(Error::Schedule(format!(
                "add_noise: {} image values vs {} noise values",
                z0.len(),
                eps.len()
            )));
        }
        let ab = self.alpha_bar(t);
        let a = ab.sqrt() as f32;
        let b = (1.0 - ab).sqrt() as f32;
        Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
    }

    /// DDIM clean-image estimate, clamped to the pixel range [-1, 1].
    pub fn ddim_z0_hat(&self, z_t: &[f32], eps_hat: &[f32], t: usize) -> Result<Vec<f32>> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        let inv_sqrt_ab = (1.0 / ab.sqrt()) as f32;
        let sig = (1.0 - ab).sqrt() as f32;
        Ok(z_t
            .iter()
            .zip(eps_hat)
            .map(|(z, e)| ((z - sig * e) * inv_sqrt_ab).clamp(-1.0, 1.0))
            .collect())
    }

    /// One deterministic DDIM update from `t` to `t_prev < t`.
    ///
    /// Re-noises the clamped clean estimate with the same predicted noise;
    /// `t_prev = 0` returns the clean estimate itself.
    pub fn ddim_step(
        &self,
        z_t: &[f32],
        eps_hat: &[f32],
        t: usize,
        t_prev: usize,
    ) -> Result<Vec<f32>> {
        if t_prev >= t {
            return Err(Error::Schedule(format!("ddim_step: t_prev {t_prev} >= t {t}")));
        }
        let z0_hat = self.ddim_z0_hat(z_t, eps_hat, t)?;
        let ab_prev = self.alpha_bar(t_prev);
        let a = ab_prev.sqrt() as f32;
        let b = (1.0 - ab_prev).sqrt() as f32;
        Ok(z0_hat.iter().zip(eps_hat).map(|(z, e)| a * z + b * e).collect())
    }

    /// `n` uniformly spaced sampling timesteps, descending from T to 1.
    ///
    /// The sampler pairs consecutive entries and finishes with a final step
    /// to `t = 0`.
    pub fn ddim_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let t_max = self.steps();
        if n == 0 || n > t_max {
            return Err(Error::Schedule(format!(
                "{n} sampling steps for a {t_max}-step schedule"
            )));
        }
        if n == 1 {
            return Ok(vec![t_max]);
        }
        let ts: Vec<usize> = (0..n)
            .map(|j| {
                let frac = (n - 1 - j) as f64 / (n - 1) as f64;
                (1.0 + (t_max - 1) as f64 * frac).round() as usize
            })
            .collect();
        debug_assert!(ts.windows(2).all(|w| w[0] > w[1]), "timesteps not descending: {ts:?}");
        Ok(ts)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Schedule(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Free-function alias for [`Schedule::linear`].
pub fn build_linear_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    Schedule::linear(t_steps, beta_start, beta_end)
}
