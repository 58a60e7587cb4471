//! Diagnostics and theory for calibrated guidance.
//!
//! This module measures what the rest of the crate produces: the per-step
//! prediction-gap series and its trajectory average `L`, Monte-Carlo
//! estimates of operator contraction rates and of the noise predictor's
//! spatial Lipschitz constant, the interval-partition loss bound
//! `g(beta, L, r) = C1 r^(2 beta N) + 2 L^2 beta^2` with its explicit
//! leading constant, the optimizer for the budget fraction `beta`, the
//! per-interval gap bound `4 C S_ab(L) r^k B`, and a match/mismatch
//! likelihood experiment on the analytic mixture.

use crate::guidance::{apply_operator, FixedPointOperatorSpec, TrajectoryRecord};
use crate::linalg::{dist, dist_sq, norm};
use crate::model::{ConditionalGmm, Latent, NoisePredictor};
use crate::rng::{derived_rng, standard_normal_vec};
use crate::sampler::{ddim_step, solve_interval, GuidedNoiseSpec, IntervalSolverConfig, NoiseMode};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Seed-derivation tag for the match/mismatch experiment trials.
const TAG_GOLDEN: u64 = 3;

/// Pairs closer than this (squared) are considered degenerate and redrawn.
const DEGENERATE_SQ: f64 = 1e-24;

/// Attempts before a degenerate-pair loop gives up.
const MAX_REDRAWS: usize = 64;

// ---------------------------------------------------------------------------
// Prediction-gap series
// ---------------------------------------------------------------------------

/// Squared prediction gaps `||eps_c(x_t) - eps_u(x_t)||^2` along a
/// trajectory, ordered from the starting timestep down to `t = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSeries {
    values: Vec<f64>,
}

impl GapSeries {
    /// Wraps a gap series, rejecting negative or non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!(
                "gap values must be finite and nonnegative, got {bad}"
            )));
        }
        Ok(GapSeries { values })
    }

    /// The per-step squared gaps, starting timestep first.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The trajectory-average loss `L` (mean of the squared gaps).
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Number of recorded steps.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Whether the series is empty.
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Recomputes the prediction-gap series of a recorded run from its latent
/// snapshots.
///
/// The record must have been produced with `record_latents` enabled.  Given
/// the raw (unmetered) predictor this reproduces the gaps stored in the
/// record bit for bit, because both evaluate the same pair at the same
/// points.
pub fn prediction_gap(
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    condition: &str,
    record: &TrajectoryRecord,
) -> Result<GapSeries> {
    let latents = record.latents.as_ref().ok_or_else(|| {
        Error::invalid("the record has no latent snapshots; rerun with record_latents enabled")
    })?;
    let mut values = Vec::with_capacity(latents.len());
    for x in latents {
        let (c, u) = pred.eps_pair(s, x, condition)?;
        values.push(dist_sq(&c, &u));
    }
    GapSeries::new(values)
}

/// Consecutive prediction differences `||eps(x_i, t_i) - eps(x_j, t_j)||`
/// between adjacent snapshots of a recorded trajectory.
///
/// This monitors how fast the prediction drifts along the path in time; it
/// is a diagnostic, not an enforced assumption.
pub fn time_smoothness(
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    condition: Option<&str>,
    record: &TrajectoryRecord,
) -> Result<Vec<f64>> {
    let latents = record.latents.as_ref().ok_or_else(|| {
        Error::invalid("the record has no latent snapshots; rerun with record_latents enabled")
    })?;
    let mut out = Vec::new();
    for pair in latents.windows(2) {
        let a = pred.eps(s, &pair[0], condition)?;
        let b = pred.eps(s, &pair[1], condition)?;
        out.push(dist(&a, &b));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Contraction-rate estimation
// ---------------------------------------------------------------------------

/// Monte-Carlo estimate of a squared contraction ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionEstimate {
    /// Mean of `||F(x) - F(x')||^2 / ||x - x'||^2` over the sampled pairs.
    pub r_hat: f64,
    /// Standard error of the mean (zero when fewer than two pairs).
    pub std_error: f64,
    /// Number of pairs that entered the estimate.
    pub n_pairs: usize,
}

/// Estimates the local contraction rate of an arbitrary self-map at
/// timestep `t`.
///
/// Each pair mixes one clean sample `x0` with two nearby noises `z` and
/// `z + scale * v` at `t`, applies the map to both points, and records the
/// squared distance ratio.  Stochastic maps receive identically seeded
/// generators for the two arms (common random numbers), so their shared
/// noise cancels out of the ratio.  Degenerate pairs are redrawn.
pub fn contraction_rate_of<F, G>(
    mut op: F,
    mut x0_sampler: G,
    s: &NoiseSchedule,
    t: usize,
    n_pairs: usize,
    perturbation_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ContractionEstimate>
where
    F: FnMut(&Latent, &mut ChaCha8Rng) -> Result<Latent>,
    G: FnMut(&mut ChaCha8Rng) -> Result<Vec<f64>>,
{
    if n_pairs == 0 {
        return Err(Error::invalid("contraction estimation needs n_pairs >= 1"));
    }
    if !(perturbation_scale.is_finite() && perturbation_scale > 0.0) {
        return Err(Error::invalid(format!(
            "perturbation scale must be positive, got {perturbation_scale}"
        )));
    }
    if t == 0 || t > s.t_max() {
        return Err(Error::invalid(format!(
            "contraction estimation needs 1 <= t <= {}, got {t}",
            s.t_max()
        )));
    }
    let ab = s.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut ratios = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let mut attempts = 0;
        let ratio = loop {
            attempts += 1;
            let x0 = x0_sampler(rng)?;
            let z = standard_normal_vec(rng, x0.len());
            let v = standard_normal_vec(rng, x0.len());
            let x: Vec<f64> = x0
                .iter()
                .zip(&z)
                .map(|(x0i, zi)| sa * x0i + sn * zi)
                .collect();
            let xp: Vec<f64> = x0
                .iter()
                .zip(z.iter().zip(&v))
                .map(|(x0i, (zi, vi))| sa * x0i + sn * (zi + perturbation_scale * vi))
                .collect();
            let d0 = dist_sq(&x, &xp);
            if d0 < DEGENERATE_SQ {
                if attempts >= MAX_REDRAWS {
                    return Err(Error::Numerical {
                        t,
                        msg: "could not draw a nondegenerate perturbation pair".to_string(),
                    });
                }
                continue;
            }
            let arm_seed: u64 = rng.random();
            let mut arm_a = ChaCha8Rng::seed_from_u64(arm_seed);
            let mut arm_b = ChaCha8Rng::seed_from_u64(arm_seed);
            let y = op(&Latent::new(x, t), &mut arm_a)?;
            let yp = op(&Latent::new(xp, t), &mut arm_b)?;
            break dist_sq(&y.x, &yp.x) / d0;
        };
        ratios.push(ratio);
    }
    let n = ratios.len();
    let mean = ratios.iter().sum::<f64>() / n as f64;
    let std_error = if n >= 2 {
        let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(ContractionEstimate {
        r_hat: mean,
        std_error,
        n_pairs: n,
    })
}

/// Estimates the local contraction rate of a calibration operator.
///
/// Convenience wrapper around [`contraction_rate_of`] that applies
/// [`apply_operator`] as the map.
#[allow(clippy::too_many_arguments)]
pub fn contraction_rate<G>(
    spec: &FixedPointOperatorSpec,
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    x0_sampler: G,
    t: usize,
    n_pairs: usize,
    perturbation_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ContractionEstimate>
where
    G: FnMut(&mut ChaCha8Rng) -> Result<Vec<f64>>,
{
    contraction_rate_of(
        |x, r| apply_operator(spec, pred, s, x, r),
        x0_sampler,
        s,
        t,
        n_pairs,
        perturbation_scale,
        rng,
    )
}

// ---------------------------------------------------------------------------
// Interval round trip and its contraction
// ---------------------------------------------------------------------------

/// The head-free interval reflection: blended denoising from `t` down to
/// `t - w` followed by unconditional inversion back up to `t`, both in unit
/// steps.
///
/// This is the transport whose fixed points make conditional and
/// unconditional denoising agree over the interval; the look-ahead operator
/// is this map followed by a linear correction.
pub fn interval_round_trip(
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    condition: &str,
    x: &Latent,
    w: usize,
    gamma: f64,
) -> Result<Latent> {
    if w == 0 || w > x.t {
        return Err(Error::invalid(format!(
            "interval width must satisfy 1 <= w <= t, got w = {w} at t = {}",
            x.t
        )));
    }
    let solver = IntervalSolverConfig { inner_steps: w };
    let down_spec = GuidedNoiseSpec::mix(gamma, condition)?;
    let down = solve_interval(pred, &down_spec, s, x, x.t - w, solver)?;
    solve_interval(
        pred,
        &GuidedNoiseSpec::unconditional(),
        s,
        &down,
        x.t,
        solver,
    )
}

/// Worst-case (over interval heads) mean contraction ratio of the interval
/// round trip on a uniform partition of width `w`.
///
/// For each head `t = w, 2w, ..., t_max` the estimator draws `n_pairs`
/// conditionally sampled pairs as in [`contraction_rate_of`] and averages
/// the squared distance ratios; the maximum head average is returned.  This
/// is the measured stand-in for the contraction bound `r` in the loss bound.
#[allow(clippy::too_many_arguments)]
pub fn interval_contraction(
    model: &ConditionalGmm,
    s: &NoiseSchedule,
    condition: &str,
    w: usize,
    gamma: f64,
    n_pairs: usize,
    perturbation_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if w == 0 || !s.t_max().is_multiple_of(w) {
        return Err(Error::invalid(format!(
            "interval width {w} must divide the timestep count {}",
            s.t_max()
        )));
    }
    let mut worst = 0.0f64;
    for i in 1..=s.t_max() / w {
        let t = i * w;
        let est = contraction_rate_of(
            |x, _| interval_round_trip(model, s, condition, x, w, gamma),
            |r| model.sample_x0(Some(condition), r).map(|l| l.x),
            s,
            t,
            n_pairs,
            perturbation_scale,
            rng,
        )?;
        worst = worst.max(est.r_hat);
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Smoothness estimation
// ---------------------------------------------------------------------------

/// Empirical spatial Lipschitz constant of the noise prediction.
///
/// Draws `n_pairs` independent uniform pairs per timestep inside the box
/// `[region.0, region.1]^d` and returns the maximum observed ratio
/// `||eps(x1, t) - eps(x2, t)|| / ||x1 - x2||` over all pairs and all
/// timesteps `1..=t_max`.  The maximum (rather than the mean) keeps the
/// estimate conservative.  Pairs closer than `1e-9` are redrawn.
pub fn estimate_smoothness(
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    condition: Option<&str>,
    region: (f64, f64),
    n_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(Error::invalid("smoothness estimation needs n_pairs >= 1"));
    }
    let (lo, hi) = region;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::invalid(format!(
            "sample region must be a finite nonempty box, got ({lo}, {hi})"
        )));
    }
    let d = pred.dim();
    let mut worst = 0.0f64;
    for t in 1..=s.t_max() {
        for _ in 0..n_pairs {
            let mut attempts = 0;
            let (x1, x2) = loop {
                attempts += 1;
                let a: Vec<f64> = (0..d).map(|_| rng.random_range(lo..hi)).collect();
                let b: Vec<f64> = (0..d).map(|_| rng.random_range(lo..hi)).collect();
                if dist(&a, &b) >= 1e-9 {
                    break (a, b);
                }
                if attempts >= MAX_REDRAWS {
                    return Err(Error::Numerical {
                        t,
                        msg: "could not draw a nondegenerate sample pair".to_string(),
                    });
                }
            };
            let e1 = pred.eps(s, &Latent::new(x1.clone(), t), condition)?;
            let e2 = pred.eps(s, &Latent::new(x2.clone(), t), condition)?;
            worst = worst.max(dist(&e1, &e2) / dist(&x1, &x2));
        }
    }
    Ok(worst)
}

/// The six-sigma sampling box around a mixture's component means.
///
/// Returns `(min_i,j mean_ij - 6 sigma_i, max_i,j mean_ij + 6 sigma_i)`,
/// the default region for [`estimate_smoothness`].
pub fn six_sigma_box(model: &ConditionalGmm) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in model.components() {
        let sigma = c.variance.sqrt();
        for m in &c.mean {
            lo = lo.min(m - 6.0 * sigma);
            hi = hi.max(m + 6.0 * sigma);
        }
    }
    (lo, hi)
}

// ---------------------------------------------------------------------------
// Loss bound with explicit constants
// ---------------------------------------------------------------------------

/// Inputs of the interval-partition loss bound.
///
/// `lambda_grid[t - 1]` and `mu_grid[t - 1]` hold the linearization
/// coefficients at timestep `t`; [`BoundParams::from_schedule`] fills them
/// from a schedule.  The slack constants default to `(c_big, c_small) =
/// (2, 0.5)` in the provided constructors; all bound statements are made
/// relative to whatever constants the caller declares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    /// Total calibration-iteration budget `N`.
    pub n: usize,
    /// Number of timesteps `T`.
    pub t_max: usize,
    /// Norm bound `B` on the latents (empirical for unbounded models).
    pub b: f64,
    /// Spatial smoothness constant `L` (zero is the degenerate limit).
    pub l: f64,
    /// Contraction-rate bound `r`, strictly inside `(0, 1)`.
    pub r: f64,
    /// Upper Taylor-slack constant `C > 1`.
    pub c_big: f64,
    /// Lower slack constant `c` in `(0, 1)`.
    pub c_small: f64,
    /// Per-timestep noise coefficients `lambda_t`, `t = 1..=T`.
    pub lambda_grid: Vec<f64>,
    /// Per-timestep latent coefficients `mu_t`, `t = 1..=T`.
    pub mu_grid: Vec<f64>,
}

impl BoundParams {
    /// Builds parameters with coefficient grids taken from `s`.
    pub fn from_schedule(
        n: usize,
        s: &NoiseSchedule,
        b: f64,
        l: f64,
        r: f64,
        c_big: f64,
        c_small: f64,
    ) -> Result<Self> {
        let coeffs = s.ode_coefficients();
        let p = BoundParams {
            n,
            t_max: s.t_max(),
            b,
            l,
            r,
            c_big,
            c_small,
            lambda_grid: (1..=s.t_max()).map(|t| coeffs.lambda(t)).collect(),
            mu_grid: (1..=s.t_max()).map(|t| coeffs.mu(t)).collect(),
        };
        p.validate()?;
        Ok(p)
    }

    /// Checks ranges and grid lengths.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("iteration budget n must be at least 1"));
        }
        if self.t_max == 0 {
            return Err(Error::invalid("timestep count t_max must be at least 1"));
        }
        if !(self.b.is_finite() && self.b > 0.0) {
            return Err(Error::invalid(format!(
                "norm bound b must be positive, got {}",
                self.b
            )));
        }
        if !(self.l.is_finite() && self.l >= 0.0) {
            return Err(Error::invalid(format!(
                "smoothness constant l must be nonnegative, got {}",
                self.l
            )));
        }
        if !(self.r.is_finite() && self.r > 0.0 && self.r < 1.0) {
            return Err(Error::invalid(format!(
                "contraction bound r must lie in (0, 1), got {}",
                self.r
            )));
        }
        if !(self.c_big.is_finite() && self.c_big > 1.0) {
            return Err(Error::invalid(format!(
                "upper slack constant c_big must exceed 1, got {}",
                self.c_big
            )));
        }
        if !(self.c_small.is_finite() && self.c_small > 0.0 && self.c_small < 1.0) {
            return Err(Error::invalid(format!(
                "lower slack constant c_small must lie in (0, 1), got {}",
                self.c_small
            )));
        }
        if self.lambda_grid.len() != self.t_max || self.mu_grid.len() != self.t_max {
            return Err(Error::invalid(format!(
                "coefficient grids must have length t_max = {}, got {} and {}",
                self.t_max,
                self.lambda_grid.len(),
                self.mu_grid.len()
            )));
        }
        if !self
            .lambda_grid
            .iter()
            .chain(&self.mu_grid)
            .all(|v| v.is_finite())
        {
            return Err(Error::invalid("coefficient grids must be finite"));
        }
        Ok(())
    }
}

/// One evaluation of the loss bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    /// The explicit leading constant `C1`.
    pub c1: f64,
    /// The per-step bound `g = C1 r^(2 beta N) + 2 L^2 beta^2`.
    pub g: f64,
    /// The absolute trajectory bound `B^2 T g`.
    pub loss_bound: f64,
}

/// Evaluates the loss bound at budget fraction `beta = 1/M`.
///
/// Requires `M` to divide both the budget `N` and the timestep count `T`
/// (fractions off the feasible grid are rejected rather than rounded).  With
/// `W = T/M`,
///
/// `C1 = (16/T) * sum_i ((|lambda_iW| L + |mu_iW|) W + 1)^2 C^2 (3W - 2)
///        / (c^2 lambda_iW^2 W^2)`,
///
/// summed over the interval endpoints `t = W, 2W, ..., T`.  A vanishing
/// `lambda` at an endpoint is rejected with the offending timestep, since
/// the bound divides by it.
pub fn theorem_bound(p: &BoundParams, beta: f64) -> Result<BoundValue> {
    p.validate()?;
    if !(beta.is_finite() && beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid(format!(
            "budget fraction beta must lie in (0, 1], got {beta}"
        )));
    }
    let m = (1.0 / beta).round() as usize;
    if m == 0 || (beta * m as f64 - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "budget fraction beta = {beta} is not the reciprocal of an integer"
        )));
    }
    if !p.n.is_multiple_of(m) {
        return Err(Error::invalid(format!(
            "interval count {m} must divide the iteration budget {}",
            p.n
        )));
    }
    if !p.t_max.is_multiple_of(m) {
        return Err(Error::invalid(format!(
            "interval count {m} must divide the timestep count {}",
            p.t_max
        )));
    }
    let w = p.t_max / m;
    let wf = w as f64;
    let mut tot = 0.0;
    for i in 1..=m {
        let t_end = i * w;
        let lam = p.lambda_grid[t_end - 1];
        let mu = p.mu_grid[t_end - 1];
        if lam == 0.0 {
            return Err(Error::Numerical {
                t: t_end,
                msg: "interval-endpoint coefficient lambda vanishes; the bound divides by it"
                    .to_string(),
            });
        }
        tot +=
            ((lam.abs() * p.l + mu.abs()) * wf + 1.0).powi(2) * p.c_big.powi(2) * (3.0 * wf - 2.0)
                / (p.c_small.powi(2) * lam * lam * wf * wf);
    }
    let c1 = 16.0 * tot / p.t_max as f64;
    let g = c1 * p.r.powf(2.0 * beta * p.n as f64) + 2.0 * p.l * p.l * beta * beta;
    Ok(BoundValue {
        c1,
        g,
        loss_bound: p.b * p.b * p.t_max as f64 * g,
    })
}

/// Derivative of the continuous relaxation of `g` in `beta`:
/// `4 L^2 beta - C1 * 2 N ln(1/r) * r^(2 beta N)`.
///
/// A strictly increasing term minus a strictly decreasing one, so it crosses
/// zero at most once on `(0, 1)`.
pub fn bound_derivative(beta: f64, n: usize, c1: f64, l: f64, r: f64) -> f64 {
    4.0 * l * l * beta - c1 * 2.0 * n as f64 * (1.0 / r).ln() * r.powf(2.0 * beta * n as f64)
}

/// Root of [`bound_derivative`] on `(0, 1]` by bisection (200 halvings).
///
/// When the derivative never turns positive (tiny `L`), the iteration runs
/// into the `beta = 1` boundary and returns it.
pub fn optimal_beta_continuous(n: usize, c1: f64, l: f64, r: f64) -> f64 {
    let (mut lo, mut hi) = (1e-6, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bound_derivative(mid, n, c1, l, r) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// The feasible-grid minimizer of the loss bound, with the continuous
/// relaxation reported alongside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalBeta {
    /// Interval count `M` at the minimizer.
    pub m: usize,
    /// Budget fraction `beta = 1/M`.
    pub beta: f64,
    /// Bound value at the minimizer.
    pub value: BoundValue,
    /// Continuous-relaxation stationary point (diagnostic; uses the `C1` of
    /// the grid minimizer).
    pub beta_continuous: f64,
}

/// Minimizes the loss bound over the feasible `beta` grid.
///
/// Feasible points are `beta = 1/M` with `M` dividing both `N` and `T`.
/// Grid points whose endpoint coefficients vanish are skipped; if nothing
/// remains the search fails.  Ties keep the smallest `M` (largest `beta`).
pub fn optimal_beta(p: &BoundParams) -> Result<OptimalBeta> {
    p.validate()?;
    let mut best: Option<(usize, f64, BoundValue)> = None;
    for m in 1..=p.n {
        if !p.n.is_multiple_of(m) || !p.t_max.is_multiple_of(m) {
            continue;
        }
        let beta = 1.0 / m as f64;
        match theorem_bound(p, beta) {
            Ok(v) => {
                if best.as_ref().is_none_or(|(_, _, b)| v.g < b.g) {
                    best = Some((m, beta, v));
                }
            }
            Err(Error::Numerical { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    let (m, beta, value) = best.ok_or_else(|| {
        Error::invalid("no feasible interval count divides both the budget and the timesteps")
    })?;
    Ok(OptimalBeta {
        m,
        beta,
        value,
        beta_continuous: optimal_beta_continuous(p.n, value.c1, p.l, p.r),
    })
}

// ---------------------------------------------------------------------------
// Uniform-partition calibration loss
// ---------------------------------------------------------------------------

/// Measured outcome of the uniform-partition calibration procedure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionLoss {
    /// Mean squared prediction gap over the trajectory (the measured `L`).
    pub mean_sq_gap: f64,
    /// Largest latent norm seen anywhere along the run (for `B_hat`).
    pub max_norm: f64,
}

/// Runs the uniform-partition calibration procedure once and measures its
/// trajectory loss.
///
/// The partition cuts `1..=T` into intervals of width `w`.  At interval
/// heads (`t` divisible by `w`) the latent is calibrated by `k` interval
/// round trips; elsewhere it passes through unchanged.  The squared gap is
/// recorded at the calibrated point of every step, and the step itself is a
/// plain unconditional deterministic update.  Latent norms are tracked at
/// every visited point so the caller can form the empirical norm bound.
pub fn uniform_partition_loss(
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    condition: &str,
    x_init: &Latent,
    w: usize,
    k: usize,
    gamma: f64,
) -> Result<PartitionLoss> {
    let t_max = s.t_max();
    if x_init.t != t_max {
        return Err(Error::invalid(format!(
            "the partition procedure starts at t_max = {t_max}, got t = {}",
            x_init.t
        )));
    }
    if w == 0 || !t_max.is_multiple_of(w) {
        return Err(Error::invalid(format!(
            "interval width {w} must divide the timestep count {t_max}"
        )));
    }
    if k == 0 {
        return Err(Error::invalid("calibration depth k must be at least 1"));
    }
    let mut x = x_init.clone();
    let mut max_norm = norm(&x.x);
    let mut sum = 0.0;
    for t in (1..=t_max).rev() {
        let mut x_hat = x.clone();
        if t % w == 0 {
            for _ in 0..k {
                x_hat = interval_round_trip(pred, s, condition, &x_hat, w, gamma)?;
            }
        }
        let (c, u) = pred.eps_pair(s, &x_hat, condition)?;
        sum += dist_sq(&c, &u);
        max_norm = max_norm.max(norm(&x_hat.x));
        x = ddim_step(pred, &GuidedNoiseSpec::unconditional(), s, &x_hat, t - 1)?;
        max_norm = max_norm.max(norm(&x.x));
    }
    Ok(PartitionLoss {
        mean_sq_gap: sum / t_max as f64,
        max_norm,
    })
}

// ---------------------------------------------------------------------------
// Per-interval gap bound
// ---------------------------------------------------------------------------

/// The per-interval gap bound `4 C S_ab(L) r^k B` with
/// `S_ab(L) = (|lambda_a| L + |mu_a|) |b - a| + 1`.
///
/// `interval` is the `(a, b)` pair of interval endpoints; the coefficients
/// are read from the grids at the head `a`.  After `k` calibration round
/// trips, the distance between the conditional and unconditional transports
/// of the calibrated point across the interval is bounded by this value.
pub fn lemma1_bound(p: &BoundParams, k: usize, interval: (usize, usize)) -> Result<f64> {
    p.validate()?;
    let (a, b) = interval;
    if a == 0 || a > p.t_max || b > p.t_max || a == b {
        return Err(Error::invalid(format!(
            "interval endpoints must be distinct timesteps with 1 <= a <= {}, got ({a}, {b})",
            p.t_max
        )));
    }
    let lam = p.lambda_grid[a - 1];
    let mu = p.mu_grid[a - 1];
    let s_ab = (lam.abs() * p.l + mu.abs()) * a.abs_diff(b) as f64 + 1.0;
    Ok(4.0 * p.c_big * s_ab * p.r.powi(k as i32) * p.b)
}

// ---------------------------------------------------------------------------
// Match/mismatch likelihood experiment
// ---------------------------------------------------------------------------

/// Paired statistics of the match/mismatch experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoldenPathReport {
    /// Number of paired trials.
    pub n_trials: usize,
    /// Inversion depth used for every trial.
    pub t_star: usize,
    /// Trials where the matching condition scored the higher likelihood.
    pub wins: usize,
    /// One-sided sign-test p-value for `wins` out of `n_trials`.
    pub sign_test_p: f64,
    /// Mean terminal log-likelihood under the matching condition.
    pub mean_log_likelihood_match: f64,
    /// Mean terminal log-likelihood under the mismatched condition.
    pub mean_log_likelihood_mismatch: f64,
    /// Mean of the per-trial likelihood differences (match minus mismatch).
    pub mean_difference: f64,
    /// Mean trajectory-average squared gap along the match-case denoise.
    pub mean_gap_match: f64,
    /// Mean trajectory-average squared gap along the mismatch-case denoise.
    pub mean_gap_mismatch: f64,
}

/// Upper-tail sign-test p-value: the probability that a fair coin shows at
/// least `wins` heads in `n` flips.
///
/// Computed with the exact binomial mass recurrence in `f64`; intended for
/// `n` up to about a thousand (beyond that the initial mass underflows).
pub fn sign_test_p(wins: usize, n: usize) -> Result<f64> {
    if n == 0 || wins > n {
        return Err(Error::invalid(format!(
            "sign test needs 1 <= n and wins <= n, got wins = {wins}, n = {n}"
        )));
    }
    let mut pmf = 0.5f64.powi(n as i32);
    let mut p = 0.0;
    for j in 0..=n {
        if j >= wins {
            p += pmf;
        }
        if j < n {
            pmf *= (n - j) as f64 / (j + 1) as f64;
        }
    }
    Ok(p.min(1.0))
}

/// Runs the match/mismatch likelihood experiment.
///
/// Each trial draws a clean sample under the matching condition, inverts it
/// unconditionally to `t_star` in unit steps, then denoises that latent
/// twice — once guided toward the matching condition and once toward the
/// mismatched one — scoring each outcome by its exact conditional
/// log-likelihood under the condition that guided it.  The trial counts as
/// a win when the matching condition scores higher.  The trajectory-average
/// squared prediction gap of each denoising leg is reported alongside.
///
/// `guidance` selects the prediction used by the denoising legs (the plain
/// conditional prediction is the default choice); the unconditional mode is
/// rejected because it cannot distinguish the two conditions, as are two
/// conditions with identical reweightings.
pub fn golden_path_experiment(
    model: &ConditionalGmm,
    s: &NoiseSchedule,
    conditions: (&str, &str),
    t_star: usize,
    guidance: &NoiseMode,
    n_trials: usize,
    seed: u64,
) -> Result<GoldenPathReport> {
    let (c_match, c_mis) = conditions;
    if t_star == 0 || t_star > s.t_max() {
        return Err(Error::invalid(format!(
            "t_star must lie in 1..={}, got {t_star}",
            s.t_max()
        )));
    }
    if n_trials == 0 {
        return Err(Error::invalid("the experiment needs n_trials >= 1"));
    }
    if c_match == c_mis || model.condition_weights(c_match)? == model.condition_weights(c_mis)? {
        return Err(Error::invalid(
            "the matching and mismatched conditions must reweight the mixture differently",
        ));
    }
    match *guidance {
        NoiseMode::Unconditional => {
            return Err(Error::invalid(
                "the denoising legs must depend on the condition; unconditional guidance cannot",
            ));
        }
        NoiseMode::Cfg { w: v } | NoiseMode::Mix { gamma: v } => {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "guidance strength must be finite and nonnegative, got {v}"
                )));
            }
        }
        NoiseMode::Conditional => {}
    }
    let unit = IntervalSolverConfig {
        inner_steps: t_star,
    };
    let mut wins = 0usize;
    let (mut ll_match_sum, mut ll_mis_sum, mut diff_sum) = (0.0, 0.0, 0.0);
    let (mut gap_match_sum, mut gap_mis_sum) = (0.0, 0.0);
    for trial in 0..n_trials {
        let mut rng = derived_rng(seed, &[TAG_GOLDEN, trial as u64]);
        let x0 = model.sample_x0(Some(c_match), &mut rng)?;
        let x_star = solve_interval(
            model,
            &GuidedNoiseSpec::unconditional(),
            s,
            &x0,
            t_star,
            unit,
        )?;
        let (ll_m, gap_m) = golden_score(model, s, &x_star, c_match, guidance)?;
        let (ll_x, gap_x) = golden_score(model, s, &x_star, c_mis, guidance)?;
        if ll_m > ll_x {
            wins += 1;
        }
        ll_match_sum += ll_m;
        ll_mis_sum += ll_x;
        diff_sum += ll_m - ll_x;
        gap_match_sum += gap_m;
        gap_mis_sum += gap_x;
    }
    let nf = n_trials as f64;
    Ok(GoldenPathReport {
        n_trials,
        t_star,
        wins,
        sign_test_p: sign_test_p(wins, n_trials)?,
        mean_log_likelihood_match: ll_match_sum / nf,
        mean_log_likelihood_mismatch: ll_mis_sum / nf,
        mean_difference: diff_sum / nf,
        mean_gap_match: gap_match_sum / nf,
        mean_gap_mismatch: gap_mis_sum / nf,
    })
}

/// Denoises `x_star` to `t = 0` in unit steps guided toward `candidate`,
/// returning the terminal log-likelihood under `candidate` and the
/// trajectory-average squared prediction gap along the way.
fn golden_score(
    model: &ConditionalGmm,
    s: &NoiseSchedule,
    x_star: &Latent,
    candidate: &str,
    guidance: &NoiseMode,
) -> Result<(f64, f64)> {
    let spec = GuidedNoiseSpec {
        mode: guidance.clone(),
        condition: Some(candidate.to_string()),
    };
    let steps = x_star.t;
    let mut cur = x_star.clone();
    let mut gap_sum = 0.0;
    while cur.t > 0 {
        let (c, u) = model.eps_pair(s, &cur, candidate)?;
        gap_sum += dist_sq(&c, &u);
        cur = ddim_step(model, &spec, s, &cur, cur.t - 1)?;
    }
    let ll = model.log_density(s, &cur.x, 0, Some(candidate))?;
    Ok((ll, gap_sum / steps as f64))
}
