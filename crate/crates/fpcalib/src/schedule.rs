//! Discrete noise schedules and derived coefficients.
//!
//! A variance-preserving diffusion over timesteps `t = 1..T` is determined by
//! per-step retention factors `alpha_t` in (0,1) with cumulative products
//! `alpha_bar_t = prod_{s<=t} alpha_s` (and `alpha_bar_0 = 1` by convention,
//! so the final denoise step to `t = 0` is well defined). Everything the
//! samplers and fixed-point operators consume is derived from this table:
//!
//! - `xi_t = sqrt(1 - alpha_bar_t) - sqrt(alpha_t - alpha_bar_t)` — the
//!   per-step calibration size of the linear CFG operator;
//! - `xi_tilde_t = sqrt(1 - alpha_bar_t)` — the CFG++ analogue (always at
//!   least `xi_t`);
//! - `lambda_t = sqrt(alpha_bar_t) * d/dt sqrt((1 - alpha_bar_t)/alpha_bar_t)`
//!   and `mu_t = -sqrt(alpha_bar_t) * d/dt (1/sqrt(alpha_bar_t))` — the
//!   probability-flow ODE linearization coefficients used by the saturation
//!   bound's explicit constants.
//!
//! The schedule is a discrete table, so the time derivatives are computed by
//! central finite differences on the log-linear interpolant of `alpha_bar`
//! (one-sided at the upper endpoint). Schedules are immutable after
//! construction and safe to share across threads.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Validated discrete noise schedule.
///
/// Invariants enforced at construction: every `alpha_t` lies strictly inside
/// (0,1), `alpha_bar` is strictly decreasing with `alpha_bar_t` in (0,1), and
/// the cache satisfies `alpha_bar_t = alpha_t * alpha_bar_{t-1}` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Probability-flow ODE linearization coefficients `lambda_t`, `mu_t` for
/// every `t` in `1..=T`, produced by [`NoiseSchedule::ode_coefficients`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeCoefficients {
    lambda: Vec<f64>,
    mu: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds the standard linear-beta schedule: `beta_t` linearly spaced
    /// from `beta_start` to `beta_end` over `T` steps, `alpha_t = 1 - beta_t`.
    ///
    /// # Errors
    ///
    /// Rejects `T < 2` and beta endpoints outside `0 < beta_start <=
    /// beta_end < 1`.
    pub fn linear_beta(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::invalid(format!(
                "schedule needs at least 2 timesteps, got T={t_max}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let step = (beta_end - beta_start) / (t_max - 1) as f64;
        let alpha = (0..t_max)
            .map(|i| 1.0 - (beta_start + step * i as f64))
            .collect();
        Self::from_alphas(alpha)
    }

    /// Builds a schedule from explicit per-step retention factors, validating
    /// every invariant. This is the general constructor; tests use it for
    /// exponential schedules `alpha_bar_t = exp(-c*t)` where the ODE
    /// coefficients have closed forms.
    ///
    /// # Errors
    ///
    /// Rejects an empty sequence, any `alpha_t` outside (0,1), and cumulative
    /// products that underflow to zero (they would make the derived
    /// coefficients overflow).
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::invalid("schedule needs at least one alpha"));
        }
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut prod = 1.0_f64;
        for (i, &a) in alpha.iter().enumerate() {
            if !(a > 0.0 && a < 1.0) || !a.is_finite() {
                return Err(Error::invalid(format!(
                    "alpha_{} = {} is outside (0,1)",
                    i + 1,
                    a
                )));
            }
            prod *= a;
            if prod <= 0.0 || !prod.is_finite() {
                return Err(Error::invalid(format!(
                    "alpha_bar underflowed at t={} (schedule too long or too aggressive)",
                    i + 1
                )));
            }
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule { alpha, alpha_bar })
    }

    /// Number of diffusion timesteps `T`.
    pub fn t_max(&self) -> usize {
        self.alpha.len()
    }

    /// Per-step retention factor `alpha_t`, `t` in `1..=T`.
    ///
    /// # Panics
    ///
    /// Panics if `t` is out of range; timestep arguments are validated by the
    /// runners before any hot loop.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(
            (1..=self.t_max()).contains(&t),
            "alpha(t={t}) out of range 1..={}",
            self.t_max()
        );
        self.alpha[t - 1]
    }

    /// Cumulative product `alpha_bar_t`, with the `alpha_bar_0 = 1` boundary
    /// convention; `t` in `0..=T`.
    ///
    /// # Panics
    ///
    /// Panics if `t > T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(
            t <= self.t_max(),
            "alpha_bar(t={t}) out of range 0..={}",
            self.t_max()
        );
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Linear-CFG calibration size
    /// `xi_t = sqrt(1 - alpha_bar_t) - sqrt(alpha_t - alpha_bar_t)`.
    ///
    /// Nonnegative for every valid schedule, and at most [`Self::xi_tilde`].
    ///
    /// # Panics
    ///
    /// Panics if `t` is outside `1..=T`.
    pub fn xi(&self, t: usize) -> f64 {
        let a = self.alpha(t);
        let ab = self.alpha_bar(t);
        (1.0 - ab).sqrt() - (a - ab).sqrt()
    }

    /// CFG++ calibration size `xi_tilde_t = sqrt(1 - alpha_bar_t)`.
    ///
    /// # Panics
    ///
    /// Panics if `t` is outside `1..=T`.
    pub fn xi_tilde(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    /// Log-linear interpolant of `alpha_bar` at a fractional timestep
    /// `u` in `[0, T]` (geometric interpolation between grid values, with
    /// `alpha_bar(0) = 1`).
    fn alpha_bar_interp(&self, u: f64) -> f64 {
        debug_assert!((0.0..=self.t_max() as f64).contains(&u));
        let lo = u.floor() as usize;
        let frac = u - lo as f64;
        let la = self.alpha_bar(lo).ln();
        if frac == 0.0 {
            return la.exp();
        }
        let lb = self.alpha_bar(lo + 1).ln();
        (la + frac * (lb - la)).exp()
    }

    /// Probability-flow ODE coefficients for every timestep.
    ///
    /// `lambda_t` multiplies the noise prediction and `mu_t` the latent in
    /// the linearized consistency-interval analysis. Both are obtained by
    /// differencing `s(u) = sqrt((1 - alpha_bar(u))/alpha_bar(u))` and
    /// `q(u) = 1/sqrt(alpha_bar(u))` on the interpolant: central differences
    /// with unit step for `t < T` (the `t = 1` stencil reaches the
    /// `alpha_bar_0 = 1` boundary value), one-sided backward at `t = T`.
    ///
    /// For any strictly decreasing schedule, `lambda_t > 0` at interior
    /// timesteps because `(1 - alpha_bar)/alpha_bar` is increasing in `t`.
    pub fn ode_coefficients(&self) -> OdeCoefficients {
        let t_max = self.t_max();
        let s = |u: f64| {
            let ab = self.alpha_bar_interp(u);
            ((1.0 - ab) / ab).sqrt()
        };
        let q = |u: f64| 1.0 / self.alpha_bar_interp(u).sqrt();
        let mut lambda = Vec::with_capacity(t_max);
        let mut mu = Vec::with_capacity(t_max);
        for t in 1..=t_max {
            let u = t as f64;
            let (ds, dq) = if t == t_max {
                (s(u) - s(u - 1.0), q(u) - q(u - 1.0))
            } else {
                (
                    (s(u + 1.0) - s(u - 1.0)) / 2.0,
                    (q(u + 1.0) - q(u - 1.0)) / 2.0,
                )
            };
            let sqrt_ab = self.alpha_bar(t).sqrt();
            lambda.push(sqrt_ab * ds);
            mu.push(-sqrt_ab * dq);
        }
        OdeCoefficients { lambda, mu }
    }
}

impl OdeCoefficients {
    /// `lambda_t`, `t` in `1..=T`.
    ///
    /// # Panics
    ///
    /// Panics if `t` is out of range.
    pub fn lambda(&self, t: usize) -> f64 {
        assert!(
            (1..=self.lambda.len()).contains(&t),
            "lambda(t={t}) out of range 1..={}",
            self.lambda.len()
        );
        self.lambda[t - 1]
    }

    /// `mu_t`, `t` in `1..=T`.
    ///
    /// # Panics
    ///
    /// Panics if `t` is out of range.
    pub fn mu(&self, t: usize) -> f64 {
        assert!(
            (1..=self.mu.len()).contains(&t),
            "mu(t={t}) out of range 1..={}",
            self.mu.len()
        );
        self.mu[t - 1]
    }

    /// Number of timesteps covered.
    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    /// True when no timesteps are covered (never the case for coefficients
    /// produced from a valid schedule).
    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    /// True iff every coefficient is finite.
    pub fn all_finite(&self) -> bool {
        self.lambda.iter().chain(&self.mu).all(|v| v.is_finite())
    }
}
