//! Fixed-point calibration for diffusion guidance.
//!
//! Classifier-free guidance and its relatives (CFG++, Z-sampling, Resampling,
//! foresight guidance) can all be written as one pattern: at each denoising
//! step, apply a fixed-point operator `F` to the current latent `K` times
//! ("calibrate"), then take one unconditional sampler step ("denoise"). The
//! fixed points of `F` are latents whose conditional and unconditional noise
//! predictions agree, so calibration steers trajectories toward states where
//! guidance is self-consistent.
//!
//! This crate implements that framework end to end over Gaussian-mixture data
//! distributions, for which the noise predictor is *analytically exact* — the
//! mixture score has a closed form, so every identity, convergence property,
//! and budget-allocation result can be checked against hand-derivable oracles
//! instead of a trained network:
//!
//! - [`schedule`]: discrete noise schedules and the coefficients derived from
//!   them (guidance-step sizes, probability-flow ODE linearization).
//! - [`model`]: conditional Gaussian-mixture data distributions with exact
//!   conditional/unconditional noise predictors.
//! - [`sampler`]: DDIM denoising and inversion over arbitrary timestep
//!   intervals, DDPM ancestral sampling, and the CFG++ denoise step.
//! - [`guidance`]: the five fixed-point operators, the calibrate-then-denoise
//!   runners for each guidance method, and iteration-budget planning.
//! - [`analysis`]: prediction-gap diagnostics, contraction-rate and
//!   smoothness estimators, the saturation bound with explicit constants, the
//!   optimal budget-split solver, and the golden-path ordering experiment.
//!
//! Guidance background: classifier-free guidance extrapolates between
//! conditional and unconditional predictions (Ho & Salimans,
//! <https://arxiv.org/abs/2207.12598>); DDIM provides the deterministic
//! sampler and its inversion (Song et al., <https://arxiv.org/abs/2010.02502>).

pub mod analysis;
pub mod guidance;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod schedule;

mod error;
mod linalg;

pub use error::{Error, Result};
