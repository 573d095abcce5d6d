//! Weight initializers. All draw from caller-provided RNGs so model builds
//! are reproducible from a seed.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He/Kaiming normal for conv kernels `[Cout,Cin,K,K]`: std = √(2/fan_in).
pub fn he_conv(rng: &mut impl Rng, cout: usize, cin: usize, k: usize) -> Vec<f32> {
    let fan_in = (cin * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
    (0..cout * cin * k * k).map(|_| normal.sample(rng) as f32).collect()
}

/// He/Kaiming normal for linear weights `[Din,Dout]`: std = √(2/Din).
pub fn he_linear(rng: &mut impl Rng, din: usize, dout: usize) -> Vec<f32> {
    let normal = Normal::new(0.0, (2.0 / din as f64).sqrt()).unwrap();
    (0..din * dout).map(|_| normal.sample(rng) as f32).collect()
}

/// N(0, std²), the embedding-table default being std = 0.02.
pub fn normal(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f32> {
    let normal = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| normal.sample(rng) as f32).collect()
}

pub fn zeros(n: usize) -> Vec<f32> {
    vec![0.0; n]
}

pub fn ones(n: usize) -> Vec<f32> {
    vec![1.0; n]
}

/// Standard normal samples (noise draws).
pub fn randn(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    (0..n).map(|_| normal.sample(rng) as f32).collect()
}

/// Uniform in [lo, hi).
pub fn uniform(rng: &mut impl Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}
