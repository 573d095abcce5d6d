//! Perception-aware layout-to-image diffusion, self-contained on CPU.
//!
//! The crate trains a small conditional denoising diffusion model on
//! synthetic detection scenes, conditions it on layout/attribute prompts,
//! and evaluates the generated images with a grid detector (mAP) and a
//! feature-space Fréchet distance. Everything numeric is built on the
//! in-crate f32 autodiff tape; no external ML runtime is involved.

pub mod adam;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod init;
pub mod params;
pub mod conditioning;
pub mod denoiser;
pub mod detector;
pub mod pa_attr;
pub mod pa_loss;
pub mod pipeline;
pub mod rng;
pub mod scenegen;
pub mod schedule;

pub use autodiff::{Op, Tape, Var};
pub use error::{Error, Result};
pub use params::{BoundParams, Grads, ParamId, ParamStore};
