//! Calibration operators and the trajectory drivers built on them.
//!
//! Every guidance method here follows one template per timestep: move the
//! current latent to a *calibrated* point `x_hat` by applying an operator on
//! the time-`t` slice, then denoise one step with the unconditional
//! prediction taken at the point the method prescribes.  The operators share
//! the form
//!
//! `x_hat = x_tilde - strength * coeff_t * (eps_c - eps_u)(x_tilde)`
//!
//! where `coeff_t` is `xi(t)` or `xi_tilde(t)` and `x_tilde` is either the
//! current point (linear variants) or a *reflected* point obtained by a
//! round trip away from and back to time `t`.  Because the correction is
//! proportional to the conditional/unconditional prediction gap, states where
//! the two branches agree are fixed points, and repeated application drives
//! the gap down — the iteration drivers expose exactly that loop along a full
//! denoising trajectory.
//!
//! Model evaluations are counted through [`Metered`]: a paired evaluation at
//! one point costs one unit, reused predictions cost nothing, and diagnostic
//! recomputations (gap recording) bypass the meter entirely.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{dist, dist_sq};
use crate::model::{forward_noise, Latent, Metered, NoisePredictor};
use crate::rng::derived_rng;
use crate::sampler::{
    ddim_invert_step, ddim_step, ddim_update_with, ddpm_update_with, solve_interval,
    GuidedNoiseSpec, IntervalSolverConfig,
};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Seed-derivation tag for resampling noise injections.
const TAG_RESAMPLE: u64 = 1;
/// Seed-derivation tag for ancestral-sampler noise.
const TAG_DDPM: u64 = 2;

/// The calibration operator family.
///
/// All strengths must be finite and nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    /// `x - w * xi(t) * (eps_c - eps_u)(x)`.
    LinearCfg {
        /// Guidance strength.
        w: f64,
    },
    /// `x - lambda * xi_tilde(t) * (eps_c - eps_u)(x)`.
    LinearCfgpp {
        /// Guidance strength.
        lambda: f64,
    },
    /// Reflect through a deterministic round trip `t -> t+1 -> t` (inversion
    /// up, blended denoise down), then apply the `xi`-scaled correction.
    Zsampling {
        /// Strength of the trailing linear correction.
        w: f64,
        /// Blend strength of the downward leg.
        gamma: f64,
        /// Guidance strength of the upward (inversion) leg; `0` inverts with
        /// the unconditional prediction, which is the standard choice.
        #[serde(default)]
        reverse_strength: f64,
    },
    /// Reflect through a stochastic round trip `t -> t+1 -> t` (forward
    /// noising up, blended denoise down), then apply the `xi`-scaled
    /// correction.
    Resampling {
        /// Strength of the trailing linear correction.
        w: f64,
        /// Blend strength of the downward leg.
        gamma: f64,
    },
    /// Reflect through a look-ahead round trip `t -> t-dt -> t` (blended
    /// denoise down, unconditional inversion up), then apply the
    /// `xi_tilde`-scaled correction.
    Foresight {
        /// Strength of the trailing linear correction.
        lambda: f64,
        /// Blend strength of the downward leg.
        gamma: f64,
        /// Look-ahead span; must satisfy `1 <= dt <= t` at application time.
        dt: usize,
    },
}

/// A calibration operator bound to a condition and a sub-stepping policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointOperatorSpec {
    /// Which operator to apply.
    pub kind: OperatorKind,
    /// Condition the conditional branch refers to.
    pub condition: String,
    /// Sub-stepping policy for reflection legs that span more than one
    /// timestep (only the foresight legs can).
    #[serde(default)]
    pub solver: IntervalSolverConfig,
}

impl FixedPointOperatorSpec {
    /// Checks strengths and solver parameters.
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        let good = match self.kind {
            OperatorKind::LinearCfg { w } => ok(w),
            OperatorKind::LinearCfgpp { lambda } => ok(lambda),
            OperatorKind::Zsampling {
                w,
                gamma,
                reverse_strength,
            } => ok(w) && ok(gamma) && ok(reverse_strength),
            OperatorKind::Resampling { w, gamma } => ok(w) && ok(gamma),
            OperatorKind::Foresight { lambda, gamma, dt } => {
                if dt == 0 {
                    return Err(Error::invalid("foresight look-ahead must be at least 1"));
                }
                ok(lambda) && ok(gamma)
            }
        };
        if !good {
            return Err(Error::invalid(
                "operator strengths must be finite and nonnegative",
            ));
        }
        if self.solver.inner_steps == 0 {
            return Err(Error::invalid("inner_steps must be at least 1"));
        }
        Ok(())
    }
}

/// Moves `x` to the point the trailing linear correction is applied at.
///
/// Linear operators return `x` unchanged; the composite operators run their
/// reflection round trip.  `rng` is consumed only by the resampling kind.
fn reflected_point(
    spec: &FixedPointOperatorSpec,
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    x: &Latent,
    rng: &mut ChaCha8Rng,
) -> Result<Latent> {
    match spec.kind {
        OperatorKind::LinearCfg { .. } | OperatorKind::LinearCfgpp { .. } => Ok(x.clone()),
        OperatorKind::Zsampling {
            gamma,
            reverse_strength,
            ..
        } => {
            if x.t + 1 > s.t_max() {
                return Err(Error::invalid(format!(
                    "reflection through t = {} needs t + 1 <= {}",
                    x.t,
                    s.t_max()
                )));
            }
            let up_spec = if reverse_strength == 0.0 {
                GuidedNoiseSpec::unconditional()
            } else {
                GuidedNoiseSpec::cfg(reverse_strength, &spec.condition)?
            };
            let up = ddim_invert_step(pred, &up_spec, s, x, x.t + 1)?;
            let down_spec = GuidedNoiseSpec::mix(gamma, &spec.condition)?;
            ddim_step(pred, &down_spec, s, &up, x.t)
        }
        OperatorKind::Resampling { gamma, .. } => {
            if x.t + 1 > s.t_max() {
                return Err(Error::invalid(format!(
                    "reflection through t = {} needs t + 1 <= {}",
                    x.t,
                    s.t_max()
                )));
            }
            let up = forward_noise(s, x, rng)?;
            let down_spec = GuidedNoiseSpec::mix(gamma, &spec.condition)?;
            ddim_step(pred, &down_spec, s, &up, x.t)
        }
        OperatorKind::Foresight { gamma, dt, .. } => {
            if dt > x.t {
                return Err(Error::invalid(format!(
                    "foresight look-ahead {dt} exceeds current timestep {}",
                    x.t
                )));
            }
            let down_spec = GuidedNoiseSpec::mix(gamma, &spec.condition)?;
            let down = solve_interval(pred, &down_spec, s, x, x.t - dt, spec.solver)?;
            solve_interval(
                pred,
                &GuidedNoiseSpec::unconditional(),
                s,
                &down,
                x.t,
                spec.solver,
            )
        }
    }
}

/// Applies the trailing linear correction at `x_tilde` and returns the
/// calibrated point together with the branch pair evaluated there.
fn linear_head(
    spec: &FixedPointOperatorSpec,
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    x_tilde: &Latent,
) -> Result<(Latent, Vec<f64>, Vec<f64>)> {
    let (strength, coeff) = match spec.kind {
        OperatorKind::LinearCfg { w }
        | OperatorKind::Zsampling { w, .. }
        | OperatorKind::Resampling { w, .. } => (w, s.xi(x_tilde.t)),
        OperatorKind::LinearCfgpp { lambda } | OperatorKind::Foresight { lambda, .. } => {
            (lambda, s.xi_tilde(x_tilde.t))
        }
    };
    let (c, u) = pred.eps_pair(s, x_tilde, &spec.condition)?;
    let x_hat: Vec<f64> = x_tilde
        .x
        .iter()
        .zip(c.iter().zip(&u))
        .map(|(xi_v, (ci, ui))| xi_v - strength * coeff * (ci - ui))
        .collect();
    Ok((Latent::new(x_hat, x_tilde.t), c, u))
}

/// One application of the calibration operator at the latent's timestep.
///
/// Requires `1 <= x.t <= t_max` (composite kinds add their own reach
/// constraints).  `rng` is consumed only by the resampling kind; passing a
/// fresh generator for each application keeps runs reproducible.
pub fn apply_operator(
    spec: &FixedPointOperatorSpec,
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    x: &Latent,
    rng: &mut ChaCha8Rng,
) -> Result<Latent> {
    spec.validate()?;
    if x.t == 0 || x.t > s.t_max() {
        return Err(Error::invalid(format!(
            "operator application needs 1 <= t <= {}, got {}",
            s.t_max(),
            x.t
        )));
    }
    let x_tilde = reflected_point(spec, pred, s, x, rng)?;
    let (x_hat, _, _) = linear_head(spec, pred, s, &x_tilde)?;
    Ok(x_hat)
}

/// Applies an arbitrary self-map `k` times and records the distance between
/// consecutive iterates.
///
/// Returns the final iterate and the `k` distances
/// `||x_(j) - x_(j-1)||` in order.
pub fn iterate_map<F>(mut op: F, x: &Latent, k: usize) -> Result<(Latent, Vec<f64>)>
where
    F: FnMut(&Latent) -> Result<Latent>,
{
    let mut cur = x.clone();
    let mut distances = Vec::with_capacity(k);
    for _ in 0..k {
        let next = op(&cur)?;
        distances.push(dist(&next.x, &cur.x));
        cur = next;
    }
    Ok((cur, distances))
}

/// Applies the calibration operator `k` times from `x`, recording distances
/// between consecutive iterates.
pub fn iterate(
    spec: &FixedPointOperatorSpec,
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    x: &Latent,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Latent, Vec<f64>)> {
    iterate_map(|cur| apply_operator(spec, pred, s, cur, rng), x, k)
}

/// Which stochastic or deterministic rule the denoising half-step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Deterministic update.
    Ddim,
    /// Stochastic ancestral update; its noise is derived from the run seed
    /// and the timestep, so trajectories are reproducible.
    Ddpm,
}

/// Where the unconditional prediction used by the denoising half-step is
/// evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseEval {
    /// At the point each method prescribes (the default).  The prediction is
    /// reused from a pair the calibration phase already paid for, so the
    /// denoising half-step is free.
    Algorithm,
    /// Freshly evaluated at the calibrated point.  Costs one extra model
    /// evaluation per step, which the meter reports honestly.
    Calibrated,
}

/// Options shared by all trajectory drivers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Denoising rule.
    pub sampler: SamplerKind,
    /// Evaluation point of the denoising prediction.
    pub denoise_eval: DenoiseEval,
    /// Record the calibrated latent at every step (needed to recompute gap
    /// series after the fact).
    pub record_latents: bool,
    /// Base seed; all noise in a run is derived from it, the timestep, and
    /// the purpose, so results do not depend on evaluation order.
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            sampler: SamplerKind::Ddim,
            denoise_eval: DenoiseEval::Algorithm,
            record_latents: false,
            seed: 0,
        }
    }
}

/// The outcome of a full guided denoising run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    /// Driver that produced the record (`cfg`, `cfgpp`, `zsampling`,
    /// `resampling`, or `fsg`).
    pub method: String,
    /// Base seed of the run.
    pub seed: u64,
    /// Timestep the run started from; gaps are recorded for
    /// `t = t_start, t_start - 1, ..., 1` in that order.
    pub t_start: usize,
    /// Squared norm of the conditional/unconditional prediction gap at the
    /// calibrated point of each step.
    pub gaps: Vec<f64>,
    /// Calibrated latents per step (same order as `gaps`), when requested.
    pub latents: Option<Vec<Latent>>,
    /// Final state at `t = 0`.
    pub final_x: Vec<f64>,
    /// Total model evaluation points spent.
    pub nfe_total: usize,
    /// Evaluation points spent by calibration (operators and their
    /// reflection legs).
    pub nfe_calibration: usize,
    /// Evaluation points spent by the denoising half-steps; zero unless the
    /// run re-evaluates at calibrated points.
    pub nfe_denoise: usize,
    /// Hash of the run configuration; filled in by the command-line layer,
    /// empty when the library is called directly.
    #[serde(default)]
    pub config_hash: String,
}

/// Squared prediction-gap diagnostic, evaluated outside the meter.
fn gap_sq_at(
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    x: &Latent,
    condition: &str,
) -> Result<f64> {
    let (c, u) = pred.eps_pair(s, x, condition)?;
    Ok(dist_sq(&c, &u))
}

/// Shared per-step state for the trajectory drivers.
struct TraceState {
    gaps: Vec<f64>,
    latents: Option<Vec<Latent>>,
    nfe_denoise: usize,
}

impl TraceState {
    fn new(opts: &RunOptions, len: usize) -> Self {
        TraceState {
            gaps: Vec::with_capacity(len),
            latents: opts.record_latents.then(|| Vec::with_capacity(len)),
            nfe_denoise: 0,
        }
    }

    /// Records diagnostics at the calibrated point.
    fn record(
        &mut self,
        pred: &dyn NoisePredictor,
        s: &NoiseSchedule,
        x_hat: &Latent,
        condition: &str,
    ) -> Result<()> {
        self.gaps.push(gap_sq_at(pred, s, x_hat, condition)?);
        if let Some(l) = self.latents.as_mut() {
            l.push(x_hat.clone());
        }
        Ok(())
    }

    /// Runs the denoising half-step from the calibrated point.
    fn denoise(
        &mut self,
        metered: &Metered<'_>,
        s: &NoiseSchedule,
        x_hat: &Latent,
        eps_alg: &[f64],
        opts: &RunOptions,
    ) -> Result<Latent> {
        let eps_owned;
        let eps_used: &[f64] = match opts.denoise_eval {
            DenoiseEval::Algorithm => eps_alg,
            DenoiseEval::Calibrated => {
                eps_owned = metered.eps(s, x_hat, None)?;
                self.nfe_denoise += 1;
                &eps_owned
            }
        };
        match opts.sampler {
            SamplerKind::Ddim => ddim_update_with(s, x_hat, x_hat.t - 1, eps_used),
            SamplerKind::Ddpm => {
                let mut rng = derived_rng(opts.seed, &[TAG_DDPM, x_hat.t as u64]);
                ddpm_update_with(s, x_hat, eps_used, &mut rng)
            }
        }
    }

    fn finish(
        self,
        method: &str,
        opts: &RunOptions,
        t_start: usize,
        final_x: Vec<f64>,
        nfe_total: usize,
    ) -> TrajectoryRecord {
        TrajectoryRecord {
            method: method.to_string(),
            seed: opts.seed,
            t_start,
            gaps: self.gaps,
            latents: self.latents,
            final_x,
            nfe_total,
            nfe_calibration: nfe_total - self.nfe_denoise,
            nfe_denoise: self.nfe_denoise,
            config_hash: String::new(),
        }
    }
}

fn check_run_start(s: &NoiseSchedule, x_init: &Latent) -> Result<()> {
    if x_init.t == 0 || x_init.t > s.t_max() {
        return Err(Error::invalid(format!(
            "runs must start from 1 <= t <= {}, got {}",
            s.t_max(),
            x_init.t
        )));
    }
    Ok(())
}

/// Runs the linearly calibrated guidance trajectory with `k` corrections per
/// step, using the `xi`-scaled operator.
///
/// Each step applies `x <- x - w * xi(t) * (eps_c - eps_u)(x)` exactly `k`
/// times (one paired evaluation each), then denoises with the unconditional
/// prediction from the *penultimate* iterate — the last pair already paid
/// for it, so a full run costs exactly `k * t_start` evaluations.
pub fn run_cfg_xk(
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    condition: &str,
    w: f64,
    k: usize,
    x_init: &Latent,
    opts: &RunOptions,
) -> Result<TrajectoryRecord> {
    run_linear_xk(pred, s, condition, w, k, x_init, opts, false)
}

/// Runs the linearly calibrated guidance trajectory with `k` corrections per
/// step, using the `xi_tilde`-scaled (noise-corrected) operator.
///
/// Identical structure to [`run_cfg_xk`] with coefficient `xi_tilde(t)` and
/// strength `lambda`; also costs exactly `k * t_start` evaluations.
pub fn run_cfgpp_xk(
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    condition: &str,
    lambda: f64,
    k: usize,
    x_init: &Latent,
    opts: &RunOptions,
) -> Result<TrajectoryRecord> {
    run_linear_xk(pred, s, condition, lambda, k, x_init, opts, true)
}

#[allow(clippy::too_many_arguments)]
fn run_linear_xk(
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    condition: &str,
    strength: f64,
    k: usize,
    x_init: &Latent,
    opts: &RunOptions,
    use_tilde: bool,
) -> Result<TrajectoryRecord> {
    if k == 0 {
        return Err(Error::invalid("iteration count must be at least 1"));
    }
    if !(strength.is_finite() && strength >= 0.0) {
        return Err(Error::invalid(format!(
            "guidance strength must be nonnegative, got {strength}"
        )));
    }
    check_run_start(s, x_init)?;
    let metered = Metered::new(pred);
    let mut trace = TraceState::new(opts, x_init.t);
    let mut x = x_init.clone();
    for t in (1..=x_init.t).rev() {
        let coeff = if use_tilde { s.xi_tilde(t) } else { s.xi(t) };
        // x_cur is the running iterate; eps_u_pen tracks the unconditional
        // prediction at the penultimate iterate, i.e. the evaluation point of
        // the final correction.
        let mut x_cur = x.x.clone();
        let mut eps_u_pen = Vec::new();
        for _ in 0..k {
            let point = Latent::new(x_cur.clone(), t);
            let (c, u) = metered.eps_pair(s, &point, condition)?;
            for j in 0..x_cur.len() {
                x_cur[j] -= strength * coeff * (c[j] - u[j]);
            }
            eps_u_pen = u;
        }
        let x_hat = Latent::new(x_cur, t);
        trace.record(pred, s, &x_hat, condition)?;
        x = trace.denoise(&metered, s, &x_hat, &eps_u_pen, opts)?;
    }
    let method = if use_tilde { "cfgpp" } else { "cfg" };
    Ok(trace.finish(method, opts, x_init.t, x.x, metered.nfe()))
}

/// Runs the reflect-and-calibrate trajectory whose reflection is the
/// deterministic round trip `t -> t+1 -> t`.
///
/// Steps listed in `active_steps` (all must satisfy `1 <= t < t_max`)
/// reflect before calibration: one unconditional inversion up, one blended
/// denoise down (strength `gamma`), then the `xi`-scaled correction with
/// strength `w`.  Other steps only calibrate.  Denoising reuses the
/// unconditional prediction from the calibration pair, so a full run costs
/// `t_start + 2 * |active|` evaluations.
#[allow(clippy::too_many_arguments)]
pub fn run_zsampling(
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    condition: &str,
    w: f64,
    gamma: f64,
    reverse_strength: f64,
    active_steps: &[usize],
    x_init: &Latent,
    opts: &RunOptions,
) -> Result<TrajectoryRecord> {
    let kind = OperatorKind::Zsampling {
        w,
        gamma,
        reverse_strength,
    };
    run_reflected(
        pred,
        s,
        condition,
        kind,
        active_steps,
        x_init,
        opts,
        "zsampling",
    )
}

/// Runs the reflect-and-calibrate trajectory whose reflection is the
/// stochastic round trip `t -> t+1 -> t`.
///
/// Active steps inject one forward-noising draw (free), denoise down with
/// blend strength `gamma` (one evaluation), and calibrate; other steps only
/// calibrate.  A full run costs `t_start + |active|` evaluations.  Noise is
/// derived from the run seed and the timestep.
#[allow(clippy::too_many_arguments)]
pub fn run_resampling(
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    condition: &str,
    w: f64,
    gamma: f64,
    active_steps: &[usize],
    x_init: &Latent,
    opts: &RunOptions,
) -> Result<TrajectoryRecord> {
    let kind = OperatorKind::Resampling { w, gamma };
    run_reflected(
        pred,
        s,
        condition,
        kind,
        active_steps,
        x_init,
        opts,
        "resampling",
    )
}

#[allow(clippy::too_many_arguments)]
fn run_reflected(
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    condition: &str,
    kind: OperatorKind,
    active_steps: &[usize],
    x_init: &Latent,
    opts: &RunOptions,
    method: &str,
) -> Result<TrajectoryRecord> {
    check_run_start(s, x_init)?;
    for &t in active_steps {
        if t == 0 || t >= s.t_max() {
            return Err(Error::invalid(format!(
                "active steps must satisfy 1 <= t < {}, got {t}",
                s.t_max()
            )));
        }
    }
    let spec = FixedPointOperatorSpec {
        kind,
        condition: condition.to_string(),
        solver: IntervalSolverConfig::default(),
    };
    spec.validate()?;
    let active: std::collections::BTreeSet<usize> = active_steps.iter().copied().collect();
    let metered = Metered::new(pred);
    let mut trace = TraceState::new(opts, x_init.t);
    let mut x = x_init.clone();
    for t in (1..=x_init.t).rev() {
        let x_tilde = if active.contains(&t) {
            let mut rng = derived_rng(opts.seed, &[TAG_RESAMPLE, t as u64]);
            reflected_point(&spec, &metered, s, &x, &mut rng)?
        } else {
            x.clone()
        };
        let (x_hat, _, eps_u) = linear_head(&spec, &metered, s, &x_tilde)?;
        trace.record(pred, s, &x_hat, condition)?;
        x = trace.denoise(&metered, s, &x_hat, &eps_u, opts)?;
    }
    Ok(trace.finish(method, opts, x_init.t, x.x, metered.nfe()))
}

/// One stage-allocation entry: `iterations` look-ahead corrections of span
/// `dt` at timestep `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    /// Timestep the iterations run at.
    pub t: usize,
    /// Number of reflection iterations.
    pub iterations: usize,
    /// Look-ahead span of each reflection.
    pub dt: usize,
}

/// A per-timestep allocation of look-ahead iterations, with the strengths
/// shared by every step of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSchedule {
    entries: Vec<StageEntry>,
    /// Strength of the per-step linear correction.
    pub lambda: f64,
    /// Blend strength of the downward reflection legs.
    pub gamma: f64,
    /// Schedule length the allocation was built for.
    pub t_max: usize,
}

impl IterationSchedule {
    /// Builds a schedule, sorting entries by descending timestep.
    ///
    /// Rejects duplicate timesteps, out-of-range timesteps, zero iteration
    /// counts, and look-ahead spans that do not satisfy `1 <= dt <= t`.
    pub fn new(
        mut entries: Vec<StageEntry>,
        lambda: f64,
        gamma: f64,
        t_max: usize,
    ) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::invalid("schedule length must be at least 1"));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(lambda) || !ok(gamma) {
            return Err(Error::invalid("strengths must be finite and nonnegative"));
        }
        entries.sort_by_key(|e| std::cmp::Reverse(e.t));
        for pair in entries.windows(2) {
            if pair[0].t == pair[1].t {
                return Err(Error::invalid(format!(
                    "duplicate allocation at t = {}",
                    pair[0].t
                )));
            }
        }
        for e in &entries {
            if e.t == 0 || e.t > t_max {
                return Err(Error::invalid(format!(
                    "allocation timestep {} outside 1..={t_max}",
                    e.t
                )));
            }
            if e.iterations == 0 {
                return Err(Error::invalid(format!(
                    "allocation at t = {} has zero iterations",
                    e.t
                )));
            }
            if e.dt == 0 || e.dt > e.t {
                return Err(Error::invalid(format!(
                    "look-ahead {} at t = {} must satisfy 1 <= dt <= t",
                    e.dt, e.t
                )));
            }
        }
        Ok(IterationSchedule {
            entries,
            lambda,
            gamma,
            t_max,
        })
    }

    /// Allocation entries, sorted by descending timestep.
    pub fn entries(&self) -> &[StageEntry] {
        &self.entries
    }

    /// Total number of reflection iterations.
    pub fn total_iterations(&self) -> usize {
        self.entries.iter().map(|e| e.iterations).sum()
    }

    /// The model-evaluation budget a run over the full schedule realizes:
    /// one per step plus two per reflection iteration (assuming no leg
    /// touches `t = 0`, where an evaluation would be free).
    pub fn planned_nfe(&self) -> usize {
        self.t_max + 2 * self.total_iterations()
    }
}

/// Splits a look-ahead iteration budget across early/mid/late stages and
/// places the iterations at concrete timesteps.
///
/// The budget is the total model-evaluation allowance: `t_max` evaluations go
/// to the per-step baseline and every iteration costs two more, so
/// `budget - t_max` must be even and nonnegative.  Iterations are split
/// between the stages proportionally to `ratio` by largest remainder (ties
/// resolved toward the earlier stage), then placed at the largest timesteps
/// of each stage band — early `(2T/3, T]`, mid `(T/3, 2T/3]`, late
/// `[2, T/3]` — one iteration per timestep.  Look-ahead spans are fixed per
/// stage at `round(0.125 T)`, `round(0.08 T)`, `round(0.04 T)` (at least 1),
/// capped at the entry's timestep.
pub fn plan_stage_allocation(
    t_max: usize,
    budget: usize,
    ratio: [f64; 3],
    lambda: f64,
    gamma: f64,
) -> Result<IterationSchedule> {
    if t_max < 3 {
        return Err(Error::invalid("stage allocation needs t_max >= 3"));
    }
    if budget < t_max {
        return Err(Error::invalid(format!(
            "budget {budget} cannot cover the per-step baseline {t_max}"
        )));
    }
    if !(budget - t_max).is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "budget {budget} minus baseline {t_max} must be even (each iteration costs two evaluations)"
        )));
    }
    if !ratio.iter().all(|r| r.is_finite() && *r >= 0.0) || ratio.iter().sum::<f64>() <= 0.0 {
        return Err(Error::invalid(
            "stage ratio must be nonnegative with a positive sum",
        ));
    }
    let iters = (budget - t_max) / 2;
    let total: f64 = ratio.iter().sum();
    let quotas: Vec<f64> = ratio.iter().map(|r| iters as f64 * r / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut seats = iters - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if seats == 0 {
            break;
        }
        counts[i] += 1;
        seats -= 1;
    }
    // Stage bands partition the timesteps; the late band starts at 2 so that
    // no reflection leg reaches t = 0 (which would make its return leg free
    // and break exact budget accounting).
    let bands: [(usize, usize); 3] = [
        (2 * t_max / 3 + 1, t_max),
        (t_max / 3 + 1, 2 * t_max / 3),
        (2, t_max / 3),
    ];
    let dt_fracs = [0.125, 0.08, 0.04];
    let mut entries = Vec::with_capacity(iters);
    for ((count, (lo, hi)), frac) in counts.iter().zip(bands).zip(dt_fracs) {
        let capacity = hi.saturating_sub(lo) + 1;
        if *count > capacity {
            return Err(Error::invalid(format!(
                "stage band {lo}..={hi} can host {capacity} iterations, allocation asks for {count}"
            )));
        }
        let dt = ((frac * t_max as f64).round() as usize).max(1);
        for i in 0..*count {
            let t = hi - i;
            entries.push(StageEntry {
                t,
                iterations: 1,
                dt: dt.min(t),
            });
        }
    }
    IterationSchedule::new(entries, lambda, gamma, t_max)
}

/// Runs the look-ahead guidance trajectory over a stage allocation.
///
/// At every step the driver first runs the allocated reflection iterations
/// (blended denoise down over `dt` timesteps, unconditional inversion back
/// up; two evaluations each), then applies the `xi_tilde`-scaled correction
/// with strength `lambda` (one paired evaluation) and denoises with the
/// unconditional prediction from that same pair.  Over a full run this
/// spends exactly [`IterationSchedule::planned_nfe`] evaluations provided no
/// reflection leg touches `t = 0`.
pub fn run_fsg(
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    condition: &str,
    schedule: &IterationSchedule,
    x_init: &Latent,
    opts: &RunOptions,
) -> Result<TrajectoryRecord> {
    check_run_start(s, x_init)?;
    if schedule.t_max != s.t_max() {
        return Err(Error::invalid(format!(
            "allocation was built for t_max = {}, schedule has {}",
            schedule.t_max,
            s.t_max()
        )));
    }
    let by_t: std::collections::BTreeMap<usize, (usize, usize)> = schedule
        .entries
        .iter()
        .map(|e| (e.t, (e.iterations, e.dt)))
        .collect();
    let down_spec = GuidedNoiseSpec::mix(schedule.gamma, condition)?;
    let up_spec = GuidedNoiseSpec::unconditional();
    let head_spec = FixedPointOperatorSpec {
        kind: OperatorKind::LinearCfgpp {
            lambda: schedule.lambda,
        },
        condition: condition.to_string(),
        solver: IntervalSolverConfig::default(),
    };
    head_spec.validate()?;
    let metered = Metered::new(pred);
    let mut trace = TraceState::new(opts, x_init.t);
    let mut x = x_init.clone();
    for t in (1..=x_init.t).rev() {
        if let Some(&(iterations, dt)) = by_t.get(&t) {
            for _ in 0..iterations {
                let down = ddim_step(&metered, &down_spec, s, &x, t - dt)?;
                x = ddim_invert_step(&metered, &up_spec, s, &down, t)?;
            }
        }
        let (x_hat, _, eps_u) = linear_head(&head_spec, &metered, s, &x)?;
        trace.record(pred, s, &x_hat, condition)?;
        x = trace.denoise(&metered, s, &x_hat, &eps_u, opts)?;
    }
    Ok(trace.finish("fsg", opts, x_init.t, x.x, metered.nfe()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Component, ConditionalGmm};
    use crate::sampler::cfgpp_denoise_step;
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;

    fn two_component_1d() -> ConditionalGmm {
        let mut conditions = BTreeMap::new();
        conditions.insert("right".to_string(), vec![0.0, 1.0]);
        conditions.insert("uniform".to_string(), vec![0.5, 0.5]);
        ConditionalGmm::new(
            vec![
                Component {
                    weight: 0.5,
                    mean: vec![-2.0],
                    variance: 1.0,
                },
                Component {
                    weight: 0.5,
                    mean: vec![2.0],
                    variance: 1.0,
                },
            ],
            conditions,
        )
        .unwrap()
    }

    fn sched50() -> NoiseSchedule {
        NoiseSchedule::linear_beta(50, 0.002, 0.25).unwrap()
    }

    fn sched100() -> NoiseSchedule {
        NoiseSchedule::linear_beta(100, 0.001, 0.13).unwrap()
    }

    #[test]
    fn linear_operator_matches_hand_formula() {
        let s = sched50();
        let m = two_component_1d();
        let spec = FixedPointOperatorSpec {
            kind: OperatorKind::LinearCfg { w: 5.5 },
            condition: "right".to_string(),
            solver: IntervalSolverConfig::default(),
        };
        let x = Latent::new(vec![0.8], 20);
        let mut rng = derived_rng(0, &[0]);
        let out = apply_operator(&spec, &m, &s, &x, &mut rng).unwrap();
        let c = m.eps(&s, &x, Some("right")).unwrap();
        let u = m.eps(&s, &x, None).unwrap();
        let expect = 0.8 - 5.5 * s.xi(20) * (c[0] - u[0]);
        assert_eq!(out.x[0], expect);
        assert_eq!(out.t, 20);
        // Two iterations equal two manual applications, and the recorded
        // distances are the consecutive-iterate distances.
        let (two, distances) = iterate(&spec, &m, &s, &x, 2, &mut rng).unwrap();
        let manual = apply_operator(&spec, &m, &s, &out, &mut rng).unwrap();
        assert_eq!(two.x, manual.x);
        assert_eq!(distances.len(), 2);
        assert_eq!(distances[0], (out.x[0] - x.x[0]).abs());
        assert_eq!(distances[1], (manual.x[0] - out.x[0]).abs());
    }

    #[test]
    fn agreeing_branches_are_fixed_points() {
        // Under the "uniform" condition the two branches coincide, so every
        // operator with a deterministic reflection leaves any point fixed up
        // to the reflection round-trip error; the purely linear ones are
        // exact fixed points.
        let s = sched50();
        let m = two_component_1d();
        let x = Latent::new(vec![1.3], 25);
        let mut rng = derived_rng(0, &[1]);
        for kind in [
            OperatorKind::LinearCfg { w: 5.5 },
            OperatorKind::LinearCfgpp { lambda: 0.6 },
        ] {
            let spec = FixedPointOperatorSpec {
                kind,
                condition: "uniform".to_string(),
                solver: IntervalSolverConfig::default(),
            };
            let out = apply_operator(&spec, &m, &s, &x, &mut rng).unwrap();
            assert_eq!(
                out.x[0], x.x[0],
                "agreeing branches must not move the point"
            );
        }
    }

    #[test]
    fn operator_validation_rejects_bad_parameters() {
        let spec = |kind| FixedPointOperatorSpec {
            kind,
            condition: "right".to_string(),
            solver: IntervalSolverConfig::default(),
        };
        assert!(spec(OperatorKind::LinearCfg { w: -1.0 })
            .validate()
            .is_err());
        assert!(spec(OperatorKind::LinearCfgpp { lambda: f64::NAN })
            .validate()
            .is_err());
        assert!(spec(OperatorKind::Foresight {
            lambda: 0.6,
            gamma: 2.0,
            dt: 0
        })
        .validate()
        .is_err());
        let mut bad_solver = spec(OperatorKind::LinearCfg { w: 1.0 });
        bad_solver.solver = IntervalSolverConfig { inner_steps: 0 };
        assert!(bad_solver.validate().is_err());
        // Reach constraints at application time.
        let s = sched50();
        let m = two_component_1d();
        let mut rng = derived_rng(0, &[2]);
        let z = spec(OperatorKind::Zsampling {
            w: 5.5,
            gamma: 2.0,
            reverse_strength: 0.0,
        });
        assert!(apply_operator(&z, &m, &s, &Latent::new(vec![0.1], 50), &mut rng).is_err());
        let f = spec(OperatorKind::Foresight {
            lambda: 0.6,
            gamma: 2.0,
            dt: 30,
        });
        assert!(apply_operator(&f, &m, &s, &Latent::new(vec![0.1], 20), &mut rng).is_err());
        assert!(apply_operator(&f, &m, &s, &Latent::new(vec![0.1], 0), &mut rng).is_err());
    }

    #[test]
    fn iterate_map_halving_gives_halving_distances() {
        // F(x) = 0.5 x from x = 8: iterates 4, 2, 1 with distances 4, 2, 1.
        let x = Latent::new(vec![8.0], 10);
        let (out, distances) = iterate_map(
            |cur| Ok(Latent::new(cur.x.iter().map(|v| 0.5 * v).collect(), cur.t)),
            &x,
            3,
        )
        .unwrap();
        assert_eq!(out.x[0], 1.0);
        assert_eq!(distances, vec![4.0, 2.0, 1.0]);
    }

    #[test]
    fn single_iteration_matches_blended_trajectory() {
        // With one correction per step the calibrate-then-denoise trajectory
        // collapses to the plain guided trajectory: for the xi-coefficient
        // operator that is the blended deterministic chain, and for the
        // xi_tilde operator it is the noise-corrected guided chain.
        let s = sched100();
        let m = two_component_1d();
        let mut rng = derived_rng(42, &[7]);
        let mut worst_cfg = 0.0f64;
        let mut worst_pp = 0.0f64;
        for i in 0..20 {
            let x0 = crate::model::sample_terminal(1, 100, &mut rng);
            let via_xk = run_cfg_xk(&m, &s, "right", 5.5, 1, &x0, &RunOptions::default()).unwrap();
            let mut x = x0.clone();
            let spec = GuidedNoiseSpec::cfg(5.5, "right").unwrap();
            for t in (1..=100usize).rev() {
                x = ddim_step(&m, &spec, &s, &x, t - 1).unwrap();
            }
            worst_cfg = worst_cfg.max((via_xk.final_x[0] - x.x[0]).abs());

            let via_pp =
                run_cfgpp_xk(&m, &s, "right", 0.6, 1, &x0, &RunOptions::default()).unwrap();
            let mut y = x0.clone();
            for _ in 0..100usize {
                y = cfgpp_denoise_step(&m, "right", 0.6, &s, &y).unwrap();
            }
            worst_pp = worst_pp.max((via_pp.final_x[0] - y.x[0]).abs());
            if i == 0 {
                assert_eq!(via_xk.nfe_total, 100);
                assert_eq!(via_pp.nfe_total, 100);
            }
        }
        assert!(
            worst_cfg < 1e-10,
            "single-iteration trajectory should match the blended chain, worst diff {worst_cfg}"
        );
        assert!(
            worst_pp < 1e-10,
            "single-iteration trajectory should match the noise-corrected chain, worst diff {worst_pp}"
        );
    }

    #[test]
    fn zero_strength_linear_run_is_the_unconditional_chain() {
        let s = sched50();
        let m = two_component_1d();
        let x0 = Latent::new(vec![0.9], 50);
        let rec = run_cfg_xk(&m, &s, "right", 0.0, 2, &x0, &RunOptions::default()).unwrap();
        let mut x = x0.clone();
        let spec = GuidedNoiseSpec::unconditional();
        for t in (1..=50usize).rev() {
            x = ddim_step(&m, &spec, &s, &x, t - 1).unwrap();
        }
        assert_relative_eq!(rec.final_x[0], x.x[0], max_relative = 1e-12);
        // Zero strength still pays for its corrections.
        assert_eq!(rec.nfe_total, 100);
    }

    #[test]
    fn evaluation_budgets_match_the_ledger() {
        let s = sched50();
        let m = two_component_1d();
        let x0 = Latent::new(vec![0.4], 50);
        let opts = RunOptions::default();

        let cfg2 = run_cfg_xk(&m, &s, "right", 5.5, 2, &x0, &opts).unwrap();
        assert_eq!(
            cfg2.nfe_total, 100,
            "two corrections per step over 50 steps"
        );
        assert_eq!(cfg2.nfe_calibration, 100);
        assert_eq!(cfg2.nfe_denoise, 0);

        let pp3 = run_cfgpp_xk(&m, &s, "right", 0.6, 3, &x0, &opts).unwrap();
        assert_eq!(pp3.nfe_total, 150);

        let active: Vec<usize> = (25..50).collect();
        let z = run_zsampling(&m, &s, "right", 5.5, 2.0, 0.0, &active, &x0, &opts).unwrap();
        assert_eq!(
            z.nfe_total,
            50 + 2 * 25,
            "one eval per step plus two per reflection"
        );

        let r = run_resampling(&m, &s, "right", 5.5, 2.0, &active, &x0, &opts).unwrap();
        assert_eq!(
            r.nfe_total,
            50 + 25,
            "noise injection is free, the down-leg is not"
        );

        let plan = plan_stage_allocation(50, 100, [3.0, 2.0, 1.0], 1.0, 2.0).unwrap();
        let f = run_fsg(&m, &s, "right", &plan, &x0, &opts).unwrap();
        assert_eq!(f.nfe_total, 100, "planned budget is realized exactly");
        assert_eq!(f.nfe_total, plan.planned_nfe());

        // Re-evaluating at the calibrated point costs one extra per step.
        let opts_cal = RunOptions {
            denoise_eval: DenoiseEval::Calibrated,
            ..RunOptions::default()
        };
        let cfg_cal = run_cfg_xk(&m, &s, "right", 5.5, 2, &x0, &opts_cal).unwrap();
        assert_eq!(cfg_cal.nfe_total, 150);
        assert_eq!(cfg_cal.nfe_denoise, 50);
        assert_eq!(cfg_cal.nfe_calibration, 100);
    }

    #[test]
    fn stage_allocation_matches_frozen_example() {
        // 50 baseline evaluations leave 25 iterations; 3:2:1 quotas are
        // 12.5, 8.33, 4.17, floors 12, 8, 4, and the single leftover seat
        // goes to the largest remainder (the early stage): 13, 8, 4.
        let plan = plan_stage_allocation(50, 100, [3.0, 2.0, 1.0], 1.0, 2.0).unwrap();
        let early: Vec<_> = plan.entries().iter().filter(|e| e.t >= 34).collect();
        let mid: Vec<_> = plan
            .entries()
            .iter()
            .filter(|e| e.t >= 17 && e.t <= 33)
            .collect();
        let late: Vec<_> = plan.entries().iter().filter(|e| e.t <= 16).collect();
        assert_eq!(early.len(), 13);
        assert_eq!(mid.len(), 8);
        assert_eq!(late.len(), 4);
        assert_eq!(plan.total_iterations(), 25);
        assert_eq!(plan.planned_nfe(), 100);
        // Iterations occupy the largest timesteps of each band, one each.
        assert_eq!(
            plan.entries()[0],
            StageEntry {
                t: 50,
                iterations: 1,
                dt: 6
            }
        );
        assert!(early.iter().all(|e| e.dt == 6));
        assert!(mid.iter().all(|e| e.dt == 4));
        assert!(late.iter().all(|e| e.dt == 2));
        assert!(early.iter().map(|e| e.t).eq((38..=50).rev()));
        assert!(late.iter().map(|e| e.t).eq((13..=16).rev()));
    }

    #[test]
    fn stage_allocation_edge_cases() {
        // A budget equal to the baseline allocates nothing.
        let empty = plan_stage_allocation(50, 50, [3.0, 2.0, 1.0], 1.0, 2.0).unwrap();
        assert!(empty.entries().is_empty());
        assert_eq!(empty.planned_nfe(), 50);
        // Budgets below the baseline or with an odd surplus are infeasible.
        assert!(plan_stage_allocation(50, 49, [3.0, 2.0, 1.0], 1.0, 2.0).is_err());
        assert!(plan_stage_allocation(50, 101, [3.0, 2.0, 1.0], 1.0, 2.0).is_err());
        // A pure-early ratio puts every iteration in the early band.
        let early_only = plan_stage_allocation(50, 80, [1.0, 0.0, 0.0], 1.0, 2.0).unwrap();
        assert!(early_only.entries().iter().all(|e| e.t >= 34));
        assert_eq!(early_only.total_iterations(), 15);
        // Exceeding a band's capacity is an error, not a silent truncation.
        assert!(plan_stage_allocation(50, 150, [1.0, 0.0, 0.0], 1.0, 2.0).is_err());
        // Degenerate ratios are rejected.
        assert!(plan_stage_allocation(50, 100, [0.0, 0.0, 0.0], 1.0, 2.0).is_err());
        assert!(plan_stage_allocation(50, 100, [-1.0, 1.0, 1.0], 1.0, 2.0).is_err());
    }

    #[test]
    fn iteration_schedule_validation() {
        let entry = |t, iterations, dt| StageEntry { t, iterations, dt };
        // Sorted on construction.
        let plan =
            IterationSchedule::new(vec![entry(10, 1, 2), entry(40, 2, 5)], 1.0, 2.0, 50).unwrap();
        assert_eq!(plan.entries()[0].t, 40);
        assert_eq!(plan.total_iterations(), 3);
        assert_eq!(plan.planned_nfe(), 56);
        // Duplicates, zero iterations, bad spans, bad strengths.
        assert!(
            IterationSchedule::new(vec![entry(10, 1, 2), entry(10, 1, 2)], 1.0, 2.0, 50).is_err()
        );
        assert!(IterationSchedule::new(vec![entry(10, 0, 2)], 1.0, 2.0, 50).is_err());
        assert!(IterationSchedule::new(vec![entry(10, 1, 11)], 1.0, 2.0, 50).is_err());
        assert!(IterationSchedule::new(vec![entry(10, 1, 0)], 1.0, 2.0, 50).is_err());
        assert!(IterationSchedule::new(vec![entry(51, 1, 2)], 1.0, 2.0, 50).is_err());
        assert!(IterationSchedule::new(vec![entry(10, 1, 2)], -0.5, 2.0, 50).is_err());
    }

    #[test]
    fn reflected_runs_are_seed_deterministic() {
        let s = sched50();
        let m = two_component_1d();
        let x0 = Latent::new(vec![-0.7], 50);
        let active: Vec<usize> = (30..45).collect();
        let opts_a = RunOptions {
            seed: 99,
            ..RunOptions::default()
        };
        let a = run_resampling(&m, &s, "right", 5.5, 2.0, &active, &x0, &opts_a).unwrap();
        let b = run_resampling(&m, &s, "right", 5.5, 2.0, &active, &x0, &opts_a).unwrap();
        assert_eq!(a.final_x, b.final_x);
        assert_eq!(a.gaps, b.gaps);
        let opts_c = RunOptions {
            seed: 100,
            ..RunOptions::default()
        };
        let c = run_resampling(&m, &s, "right", 5.5, 2.0, &active, &x0, &opts_c).unwrap();
        assert_ne!(
            a.final_x, c.final_x,
            "a different seed must change the noise"
        );
        // The stochastic ancestral sampler is reproducible the same way.
        let opts_ddpm = RunOptions {
            sampler: SamplerKind::Ddpm,
            seed: 7,
            ..RunOptions::default()
        };
        let d1 = run_cfg_xk(&m, &s, "right", 5.5, 1, &x0, &opts_ddpm).unwrap();
        let d2 = run_cfg_xk(&m, &s, "right", 5.5, 1, &x0, &opts_ddpm).unwrap();
        assert_eq!(d1.final_x, d2.final_x);
    }

    #[test]
    fn active_steps_are_validated() {
        let s = sched50();
        let m = two_component_1d();
        let x0 = Latent::new(vec![0.2], 50);
        let opts = RunOptions::default();
        // t = t_max cannot reflect upward.
        assert!(run_zsampling(&m, &s, "right", 5.5, 2.0, 0.0, &[50], &x0, &opts).is_err());
        assert!(run_resampling(&m, &s, "right", 5.5, 2.0, &[0], &x0, &opts).is_err());
        // Runs must start inside the schedule.
        assert!(run_cfg_xk(&m, &s, "right", 5.5, 1, &Latent::new(vec![0.0], 0), &opts).is_err());
        assert!(run_cfg_xk(&m, &s, "right", 5.5, 0, &x0, &opts).is_err());
    }

    #[test]
    fn records_carry_latents_and_gaps_in_step_order() {
        let s = sched50();
        let m = two_component_1d();
        let x0 = Latent::new(vec![0.5], 50);
        let opts = RunOptions {
            record_latents: true,
            ..RunOptions::default()
        };
        let rec = run_cfgpp_xk(&m, &s, "right", 0.6, 2, &x0, &opts).unwrap();
        assert_eq!(rec.t_start, 50);
        assert_eq!(rec.gaps.len(), 50);
        let latents = rec.latents.as_ref().unwrap();
        assert_eq!(latents.len(), 50);
        for (i, l) in latents.iter().enumerate() {
            assert_eq!(l.t, 50 - i, "latents are recorded from t_start down to 1");
        }
        // Gaps can be recomputed from the recorded latents.
        for (l, g) in latents.iter().zip(&rec.gaps) {
            let (c, u) = m.eps_pair(&s, l, "right").unwrap();
            assert_eq!(dist_sq(&c, &u), *g);
        }
        assert!(rec.gaps.iter().all(|g| g.is_finite() && *g >= 0.0));
    }

    #[test]
    fn gap_series_shrinks_with_more_iterations() {
        // More corrections per step shrink the mean prediction gap at the
        // calibrated points: K = 3 should beat K = 1 comfortably on average.
        let s = sched50();
        let m = two_component_1d();
        let mut rng = derived_rng(5, &[11]);
        let mut mean_k1 = 0.0;
        let mut mean_k3 = 0.0;
        let n = 10;
        for _ in 0..n {
            let x0 = crate::model::sample_terminal(1, 50, &mut rng);
            let r1 = run_cfgpp_xk(&m, &s, "right", 0.6, 1, &x0, &RunOptions::default()).unwrap();
            let r3 = run_cfgpp_xk(&m, &s, "right", 0.6, 3, &x0, &RunOptions::default()).unwrap();
            mean_k1 += r1.gaps.iter().sum::<f64>() / 50.0;
            mean_k3 += r3.gaps.iter().sum::<f64>() / 50.0;
        }
        mean_k1 /= n as f64;
        mean_k3 /= n as f64;
        assert!(
            mean_k3 < 0.5 * mean_k1,
            "expected K=3 mean gap well below K=1: {mean_k3} vs {mean_k1}"
        );
    }

    #[test]
    fn lookahead_reflection_spends_two_evaluations_per_iteration() {
        let s = sched100();
        let m = two_component_1d();
        let plan = IterationSchedule::new(
            vec![StageEntry {
                t: 60,
                iterations: 2,
                dt: 10,
            }],
            1.0,
            2.0,
            100,
        )
        .unwrap();
        let x0 = Latent::new(vec![0.3], 100);
        let rec = run_fsg(&m, &s, "right", &plan, &x0, &RunOptions::default()).unwrap();
        assert_eq!(rec.nfe_total, 100 + 2 * 2);
        assert_eq!(rec.nfe_total, plan.planned_nfe());
    }

    #[test]
    fn resampling_round_trip_matches_first_order_expansion() {
        // The stochastic round trip x -> noise up -> blended denoise down
        // expands to x + m * z + n * eps_blend(x) with
        // m = sqrt(1 - alpha_{t+1}) / sqrt(alpha_{t+1}) and
        // n = sqrt(1 - abar_t) - sqrt(1 - abar_{t+1}) / sqrt(alpha_{t+1});
        // the residual shrinks quadratically with the step size, so refining
        // the schedule 4x should shrink it about 16x (we require 8x).
        let m = two_component_1d();
        let mut mean_errs = Vec::new();
        for t_f in [50usize, 200] {
            let s = NoiseSchedule::linear_beta(t_f, 0.1 / t_f as f64, 12.5 / t_f as f64).unwrap();
            let t = t_f / 2;
            let mut rng = derived_rng(9, &[t_f as u64]);
            let mut total = 0.0;
            let n_draws = 40;
            for _ in 0..n_draws {
                let x = Latent::new(
                    crate::rng::standard_normal_vec(&mut rng, 1)
                        .iter()
                        .map(|v| 2.0 * v)
                        .collect(),
                    t,
                );
                let z = crate::rng::standard_normal_vec(&mut rng, 1);
                // Exact round trip with this known injection.
                let a_next = s.alpha(t + 1);
                let up = Latent::new(
                    vec![a_next.sqrt() * x.x[0] + (1.0 - a_next).sqrt() * z[0]],
                    t + 1,
                );
                let down_spec = GuidedNoiseSpec::mix(2.0, "right").unwrap();
                let exact = ddim_step(&m, &down_spec, &s, &up, t).unwrap();
                // First-order expansion around the current point.
                let m_coef = (1.0 - a_next).sqrt() / a_next.sqrt();
                let n_coef = (1.0 - s.alpha_bar(t)).sqrt()
                    - (1.0 - s.alpha_bar(t + 1)).sqrt() / a_next.sqrt();
                let e_blend = crate::sampler::guided_eps(&m, &down_spec, &s, &x).unwrap();
                let approx = x.x[0] + m_coef * z[0] + n_coef * e_blend[0];
                total += (exact.x[0] - approx).abs();
            }
            mean_errs.push(total / n_draws as f64);
        }
        assert!(
            mean_errs[1] < mean_errs[0] / 8.0,
            "expected roughly quadratic shrinkage, got {} -> {}",
            mean_errs[0],
            mean_errs[1]
        );
        assert!(mean_errs[0] < 6e-2);
    }

    #[test]
    fn iterates_contract_at_the_orbit_rate() {
        // Look-ahead operator at t = 60 with dt = 30 on the 100-step
        // schedule.  For each start, estimate the local contraction factor
        // with perturbed pairs along the orbit itself, then check that the
        // squared distance ratios of the actual iterates stay within a small
        // slack of it.
        let s = sched100();
        let m = two_component_1d();
        let spec = FixedPointOperatorSpec {
            kind: OperatorKind::Foresight {
                lambda: 0.6,
                gamma: 2.0,
                dt: 30,
            },
            condition: "right".to_string(),
            solver: IntervalSolverConfig { inner_steps: 30 },
        };
        let t = 60;
        let ab = s.alpha_bar(t);
        let mut rng = derived_rng(31, &[0]);
        let mut rng_op = derived_rng(31, &[1]);
        let mut pass = 0;
        let n_trials = 20;
        let k_iter = 4;
        for _ in 0..n_trials {
            let x0 = m.sample_x0(Some("right"), &mut rng).unwrap();
            let z = crate::rng::standard_normal_vec(&mut rng, 1);
            let start = Latent::new(vec![ab.sqrt() * x0.x[0] + (1.0 - ab).sqrt() * z[0]], t);
            let mut orbit = vec![start];
            for _ in 0..k_iter {
                let next =
                    apply_operator(&spec, &m, &s, orbit.last().unwrap(), &mut rng_op).unwrap();
                orbit.push(next);
            }
            let dists: Vec<f64> = orbit
                .windows(2)
                .map(|w| (w[1].x[0] - w[0].x[0]).abs())
                .collect();
            // Worst-case local contraction factor: perturbed pairs at every
            // orbit point a distance window starts from.
            let mut r_local = 0.0f64;
            for point in &orbit[..k_iter] {
                let y = apply_operator(&spec, &m, &s, point, &mut rng_op).unwrap();
                for _ in 0..8 {
                    let v = crate::rng::standard_normal_vec(&mut rng, 1);
                    let pert = Latent::new(vec![point.x[0] + 1e-3 * v[0]], t);
                    let yp = apply_operator(&spec, &m, &s, &pert, &mut rng_op).unwrap();
                    r_local = r_local.max(dist_sq(&y.x, &yp.x) / dist_sq(&point.x, &pert.x));
                }
            }
            let ok = dists
                .windows(2)
                .all(|w| w[1] * w[1] <= (r_local + 0.05) * w[0] * w[0] + 1e-18);
            if ok {
                pass += 1;
            }
        }
        assert!(
            pass >= n_trials - 1,
            "distance decay should track the orbit-local rate: {pass}/{n_trials}"
        );
    }

    #[test]
    fn repeated_application_shrinks_the_gap_monotonically() {
        // Along iterate sequences of the look-ahead operator the prediction
        // gap at successive iterates is nonincreasing in at least 95 of 100
        // starts.
        let s = sched100();
        let m = two_component_1d();
        let spec = FixedPointOperatorSpec {
            kind: OperatorKind::Foresight {
                lambda: 0.6,
                gamma: 2.0,
                dt: 30,
            },
            condition: "right".to_string(),
            solver: IntervalSolverConfig { inner_steps: 30 },
        };
        let t = 60;
        let ab = s.alpha_bar(t);
        let mut rng = derived_rng(31, &[2]);
        let mut rng_op = derived_rng(31, &[3]);
        let mut ok = 0;
        for _ in 0..100 {
            let x0 = m.sample_x0(Some("right"), &mut rng).unwrap();
            let z = crate::rng::standard_normal_vec(&mut rng, 1);
            let mut x = Latent::new(vec![ab.sqrt() * x0.x[0] + (1.0 - ab).sqrt() * z[0]], t);
            let mut gaps = Vec::new();
            for _ in 0..4 {
                x = apply_operator(&spec, &m, &s, &x, &mut rng_op).unwrap();
                gaps.push(gap_sq_at(&m, &s, &x, "right").unwrap().sqrt());
            }
            if gaps.windows(2).all(|w| w[1] <= w[0] + 1e-12) {
                ok += 1;
            }
        }
        assert!(
            ok >= 95,
            "gap should shrink monotonically along iterates in at least 95/100 starts, got {ok}"
        );
    }
}
