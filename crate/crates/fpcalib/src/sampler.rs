//! Deterministic and stochastic denoising steps over a noise schedule.
//!
//! The central primitive is the generalized deterministic update between any
//! two timesteps `t -> t'`:
//!
//! `x' = sqrt(abar_t') phi(x) + sqrt(1 - abar_t') eps(x)`
//!
//! where `phi(x) = (x - sqrt(1 - abar_t) eps(x)) / sqrt(abar_t)` is the
//! predicted clean point.  With `t' < t` this denoises; with `t' > t` it
//! inverts the deterministic flow, evaluating the prediction at the current
//! point in both directions (Song et al., arXiv:2010.02502).  A stochastic
//! ancestral step and the noise-corrected guided step of CFG++ round out the
//! module.
//!
//! Every function that needs a noise prediction takes a [`GuidedNoiseSpec`]
//! describing which prediction to use: unconditional, conditional, or one of
//! the two blended forms `eps_u + w (eps_c - eps_u)`.  At `t = 0` the
//! prediction coefficient vanishes and all specs resolve to an exact zero
//! vector without consulting the predictor (and without charging a model
//! evaluation).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::all_finite;
use crate::model::{Latent, NoisePredictor};
use crate::rng::standard_normal_vec;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Which noise prediction a sampling step should use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// The unconditional prediction `eps_u`.
    Unconditional,
    /// The conditional prediction `eps_c`.
    Conditional,
    /// Classifier-free guidance `eps_u + w (eps_c - eps_u)`.
    Cfg {
        /// Guidance strength; `w = 1` recovers the conditional prediction.
        w: f64,
    },
    /// The blended prediction `eps_u + gamma (eps_c - eps_u)` used for
    /// reflection legs; algebraically the same form as `Cfg`, kept separate
    /// because the two play different roles and carry different defaults.
    Mix {
        /// Blend strength; `gamma = 1` recovers the conditional prediction.
        gamma: f64,
    },
}

/// A noise prediction request: a mode plus the condition it refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedNoiseSpec {
    /// How to combine the conditional and unconditional branches.
    pub mode: NoiseMode,
    /// Condition name; required by every mode except `Unconditional`.
    pub condition: Option<String>,
}

impl GuidedNoiseSpec {
    /// Plain unconditional prediction.
    pub fn unconditional() -> Self {
        GuidedNoiseSpec {
            mode: NoiseMode::Unconditional,
            condition: None,
        }
    }

    /// Plain conditional prediction under `condition`.
    pub fn conditional(condition: &str) -> Self {
        GuidedNoiseSpec {
            mode: NoiseMode::Conditional,
            condition: Some(condition.to_string()),
        }
    }

    /// Classifier-free guidance with strength `w` (must be nonnegative).
    pub fn cfg(w: f64, condition: &str) -> Result<Self> {
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::invalid(format!(
                "guidance strength must be nonnegative, got {w}"
            )));
        }
        Ok(GuidedNoiseSpec {
            mode: NoiseMode::Cfg { w },
            condition: Some(condition.to_string()),
        })
    }

    /// Blended prediction with strength `gamma` (must be nonnegative).
    pub fn mix(gamma: f64, condition: &str) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::invalid(format!(
                "blend strength must be nonnegative, got {gamma}"
            )));
        }
        Ok(GuidedNoiseSpec {
            mode: NoiseMode::Mix { gamma },
            condition: Some(condition.to_string()),
        })
    }

    /// The condition this spec needs, or an error if it is missing.
    fn required_condition(&self) -> Result<&str> {
        self.condition
            .as_deref()
            .ok_or_else(|| Error::invalid("this noise mode requires a condition"))
    }
}

/// Evaluates the guided noise prediction that `spec` describes.
///
/// At `x.t == 0` this returns an exact zero vector without calling the
/// predictor: every update formula multiplies the prediction by a coefficient
/// that vanishes with `1 - abar_0 = 0`, so zero is the exact limit and no
/// model evaluation is charged.  Blended modes evaluate both branches at the
/// same point through [`NoisePredictor::eps_pair`], which meters charge once.
pub fn guided_eps<P: NoisePredictor + ?Sized>(
    pred: &P,
    spec: &GuidedNoiseSpec,
    s: &NoiseSchedule,
    x: &Latent,
) -> Result<Vec<f64>> {
    if x.t == 0 {
        return Ok(vec![0.0; x.dim()]);
    }
    match spec.mode {
        NoiseMode::Unconditional => pred.eps(s, x, None),
        NoiseMode::Conditional => pred.eps(s, x, Some(spec.required_condition()?)),
        NoiseMode::Cfg { w } => {
            let (c, u) = pred.eps_pair(s, x, spec.required_condition()?)?;
            Ok(blend(&u, &c, w))
        }
        NoiseMode::Mix { gamma } => {
            let (c, u) = pred.eps_pair(s, x, spec.required_condition()?)?;
            Ok(blend(&u, &c, gamma))
        }
    }
}

/// `u + w (c - u)` componentwise.
fn blend(u: &[f64], c: &[f64], w: f64) -> Vec<f64> {
    u.iter().zip(c).map(|(ui, ci)| ui + w * (ci - ui)).collect()
}

/// The generalized deterministic update with a caller-supplied prediction.
///
/// Computes `sqrt(abar_t') phi + sqrt(1 - abar_t') eps` where
/// `phi = (x - sqrt(1 - abar_t) eps) / sqrt(abar_t)`, for any pair of
/// timesteps.  This is the shared primitive behind [`ddim_step`] and
/// [`ddim_invert_step`]; it is public because the iteration drivers reuse a
/// prediction from an earlier point when denoising, and that reuse is
/// exactly "run the update with this particular eps".
pub fn ddim_update_with(
    s: &NoiseSchedule,
    x: &Latent,
    t_next: usize,
    eps: &[f64],
) -> Result<Latent> {
    if x.t > s.t_max() || t_next > s.t_max() {
        return Err(Error::invalid(format!(
            "timesteps {} -> {t_next} must lie within 0..={}",
            x.t,
            s.t_max()
        )));
    }
    if eps.len() != x.dim() {
        return Err(Error::invalid(format!(
            "prediction has dimension {}, latent has {}",
            eps.len(),
            x.dim()
        )));
    }
    let ab_s = s.alpha_bar(x.t);
    let ab_d = s.alpha_bar(t_next);
    let out: Vec<f64> =
        x.x.iter()
            .zip(eps)
            .map(|(xi, ei)| {
                let phi = (xi - (1.0 - ab_s).sqrt() * ei) / ab_s.sqrt();
                ab_d.sqrt() * phi + (1.0 - ab_d).sqrt() * ei
            })
            .collect();
    if !all_finite(&out) {
        return Err(Error::Numerical {
            t: x.t,
            msg: "deterministic update produced a non-finite state".into(),
        });
    }
    Ok(Latent::new(out, t_next))
}

/// One deterministic denoising step `t -> t_next` with `t_next < t`.
pub fn ddim_step<P: NoisePredictor + ?Sized>(
    pred: &P,
    spec: &GuidedNoiseSpec,
    s: &NoiseSchedule,
    x: &Latent,
    t_next: usize,
) -> Result<Latent> {
    if t_next >= x.t {
        return Err(Error::invalid(format!(
            "denoising step needs t_next < t, got {} -> {t_next}",
            x.t
        )));
    }
    let eps = guided_eps(pred, spec, s, x)?;
    ddim_update_with(s, x, t_next, &eps)
}

/// One deterministic inversion step `t -> t_next` with `t_next > t`.
///
/// Runs the same update formula as [`ddim_step`] with the prediction
/// evaluated at the current point, so a down-step followed by an up-step (or
/// vice versa) is only approximately the identity; the residual shrinks with
/// the step size.  Inversion from `t = 0` is allowed and uses the exact zero
/// prediction.
pub fn ddim_invert_step<P: NoisePredictor + ?Sized>(
    pred: &P,
    spec: &GuidedNoiseSpec,
    s: &NoiseSchedule,
    x: &Latent,
    t_next: usize,
) -> Result<Latent> {
    if t_next <= x.t {
        return Err(Error::invalid(format!(
            "inversion step needs t_next > t, got {} -> {t_next}",
            x.t
        )));
    }
    let eps = guided_eps(pred, spec, s, x)?;
    ddim_update_with(s, x, t_next, &eps)
}

/// Sub-stepping policy for transporting a latent across a timestep interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalSolverConfig {
    /// Requested number of sub-steps for the interval.  The interval is cut
    /// into spans of length `ceil(span / inner_steps)`, so the realized
    /// number of steps is at most `inner_steps` (equal when it divides the
    /// span).  Must be at least 1.
    pub inner_steps: usize,
}

impl Default for IntervalSolverConfig {
    fn default() -> Self {
        IntervalSolverConfig { inner_steps: 1 }
    }
}

/// Transports `x` to `t_target` (in either direction) by repeated
/// deterministic steps on a uniform sub-grid.
///
/// The model evaluation count equals the realized number of sub-steps (steps
/// leaving `t = 0` are free), which callers can observe through a metered
/// predictor.
pub fn solve_interval<P: NoisePredictor + ?Sized>(
    pred: &P,
    spec: &GuidedNoiseSpec,
    s: &NoiseSchedule,
    x: &Latent,
    t_target: usize,
    solver: IntervalSolverConfig,
) -> Result<Latent> {
    if solver.inner_steps == 0 {
        return Err(Error::invalid("inner_steps must be at least 1"));
    }
    if t_target == x.t {
        return Err(Error::invalid(format!(
            "interval solve needs a target different from the current timestep {}",
            x.t
        )));
    }
    if t_target > s.t_max() || x.t > s.t_max() {
        return Err(Error::invalid(format!(
            "interval {} -> {t_target} must lie within 0..={}",
            x.t,
            s.t_max()
        )));
    }
    let span = t_target.abs_diff(x.t);
    let sub = span.div_ceil(solver.inner_steps);
    let mut cur = x.clone();
    while cur.t != t_target {
        let next = if t_target > cur.t {
            (cur.t + sub).min(t_target)
        } else {
            cur.t.saturating_sub(sub).max(t_target)
        };
        cur = if next > cur.t {
            ddim_invert_step(pred, spec, s, &cur, next)?
        } else {
            ddim_step(pred, spec, s, &cur, next)?
        };
    }
    Ok(cur)
}

/// The ancestral update `t -> t-1` with a caller-supplied prediction.
///
/// Mean `(x - (1 - alpha_t) / sqrt(1 - abar_t) eps) / sqrt(alpha_t)` plus
/// Gaussian noise with the posterior variance
/// `(1 - alpha_t)(1 - abar_{t-1}) / (1 - abar_t)`.  At `t = 1` the variance
/// is exactly zero (because `abar_0 = 1`) and no noise is drawn.
pub fn ddpm_update_with(
    s: &NoiseSchedule,
    x: &Latent,
    eps: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Latent> {
    if x.t == 0 || x.t > s.t_max() {
        return Err(Error::invalid(format!(
            "ancestral step needs 1 <= t <= {}, got {}",
            s.t_max(),
            x.t
        )));
    }
    if eps.len() != x.dim() {
        return Err(Error::invalid(format!(
            "prediction has dimension {}, latent has {}",
            eps.len(),
            x.dim()
        )));
    }
    let a = s.alpha(x.t);
    let ab = s.alpha_bar(x.t);
    let ab_prev = s.alpha_bar(x.t - 1);
    let var = (1.0 - a) * (1.0 - ab_prev) / (1.0 - ab);
    let mut out: Vec<f64> =
        x.x.iter()
            .zip(eps)
            .map(|(xi, ei)| (xi - (1.0 - a) / (1.0 - ab).sqrt() * ei) / a.sqrt())
            .collect();
    if var > 0.0 {
        let z = standard_normal_vec(rng, out.len());
        for (oi, zi) in out.iter_mut().zip(z) {
            *oi += var.sqrt() * zi;
        }
    }
    if !all_finite(&out) {
        return Err(Error::Numerical {
            t: x.t,
            msg: "ancestral update produced a non-finite state".into(),
        });
    }
    Ok(Latent::new(out, x.t - 1))
}

/// One stochastic ancestral step `t -> t-1` (Ho et al., arXiv:2006.11239).
pub fn ddpm_step<P: NoisePredictor + ?Sized>(
    pred: &P,
    spec: &GuidedNoiseSpec,
    s: &NoiseSchedule,
    x: &Latent,
    rng: &mut ChaCha8Rng,
) -> Result<Latent> {
    let eps = guided_eps(pred, spec, s, x)?;
    ddpm_update_with(s, x, &eps, rng)
}

/// One noise-corrected guided step `t -> t-1`: the clean-point prediction
/// uses the blended noise `eps_u + lambda (eps_c - eps_u)` while the
/// renoising term keeps the unconditional prediction.
///
/// This is the per-step form of CFG++ (a manifold-preserving variant of
/// classifier-free guidance); `lambda = 0` reduces it to the unconditional
/// deterministic step.  Both branch predictions are evaluated at `x` through
/// one paired call.
pub fn cfgpp_denoise_step<P: NoisePredictor + ?Sized>(
    pred: &P,
    condition: &str,
    lambda: f64,
    s: &NoiseSchedule,
    x: &Latent,
) -> Result<Latent> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid(format!(
            "guidance strength must be nonnegative, got {lambda}"
        )));
    }
    if x.t == 0 || x.t > s.t_max() {
        return Err(Error::invalid(format!(
            "guided step needs 1 <= t <= {}, got {}",
            s.t_max(),
            x.t
        )));
    }
    let (c, u) = pred.eps_pair(s, x, condition)?;
    let e_l = blend(&u, &c, lambda);
    let ab = s.alpha_bar(x.t);
    let ab_prev = s.alpha_bar(x.t - 1);
    let out: Vec<f64> =
        x.x.iter()
            .zip(e_l.iter().zip(&u))
            .map(|(xi, (eli, ui))| {
                let phi = (xi - (1.0 - ab).sqrt() * eli) / ab.sqrt();
                ab_prev.sqrt() * phi + (1.0 - ab_prev).sqrt() * ui
            })
            .collect();
    if !all_finite(&out) {
        return Err(Error::Numerical {
            t: x.t,
            msg: "guided step produced a non-finite state".into(),
        });
    }
    Ok(Latent::new(out, x.t - 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_noise, Component, ConditionalGmm, Metered, ZeroPredictor};
    use crate::rng::derived_rng;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use std::collections::BTreeMap;

    /// abar_1 = 0.64, abar_2 = 0.25 (alpha_2 = 25/64 exactly).
    fn two_step_schedule() -> NoiseSchedule {
        NoiseSchedule::from_alphas(vec![0.64, 0.390625]).unwrap()
    }

    fn single_standard(dim: usize) -> ConditionalGmm {
        ConditionalGmm::new(
            vec![Component {
                weight: 1.0,
                mean: vec![0.0; dim],
                variance: 1.0,
            }],
            BTreeMap::new(),
        )
        .unwrap()
    }

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

    #[test]
    fn zero_prediction_step_is_pure_rescaling() {
        // With eps = 0 the update is x' = sqrt(abar_t'/abar_t) x:
        // sqrt(0.64/0.25) = 1.6 at x = 1.
        let s = two_step_schedule();
        let stub = ZeroPredictor { dim: 1 };
        let out = ddim_step(
            &stub,
            &GuidedNoiseSpec::unconditional(),
            &s,
            &Latent::new(vec![1.0], 2),
            1,
        )
        .unwrap();
        assert_relative_eq!(out.x[0], 1.6, max_relative = 1e-14);
        assert_eq!(out.t, 1);
        // Inversion with eps = 0 rescales the other way: sqrt(0.25/0.64) = 0.625.
        let up = ddim_invert_step(
            &stub,
            &GuidedNoiseSpec::unconditional(),
            &s,
            &Latent::new(vec![1.0], 1),
            2,
        )
        .unwrap();
        assert_relative_eq!(up.x[0], 0.625, max_relative = 1e-14);
    }

    #[test]
    fn analytic_step_matches_hand_computation() {
        // Single standard normal, abar_2 = 0.25, x = 1: the marginal variance
        // is 1, so eps = sqrt(0.75) * 1.  Then phi = (1 - 0.75) / 0.5 = 0.5
        // and x_1 = 0.8 * 0.5 + 0.6 * sqrt(0.75) = 0.9196152422706634.
        let s = two_step_schedule();
        let m = single_standard(1);
        let out = ddim_step(
            &m,
            &GuidedNoiseSpec::unconditional(),
            &s,
            &Latent::new(vec![1.0], 2),
            1,
        )
        .unwrap();
        assert_relative_eq!(out.x[0], 0.9196152422706634, max_relative = 1e-13);
    }

    #[test]
    fn step_direction_is_validated() {
        let s = two_step_schedule();
        let stub = ZeroPredictor { dim: 1 };
        let spec = GuidedNoiseSpec::unconditional();
        let x = Latent::new(vec![1.0], 1);
        assert!(ddim_step(&stub, &spec, &s, &x, 1).is_err());
        assert!(ddim_step(&stub, &spec, &s, &x, 2).is_err());
        assert!(ddim_invert_step(&stub, &spec, &s, &x, 1).is_err());
        assert!(ddim_invert_step(&stub, &spec, &s, &x, 0).is_err());
        // Targets beyond the schedule are rejected.
        assert!(ddim_invert_step(&stub, &spec, &s, &x, 3).is_err());
    }

    #[test]
    fn inversion_from_clean_data_needs_no_prediction() {
        // ZeroPredictor errors at t = 0, so success here proves the predictor
        // was never consulted: the exact zero limit is used instead, and the
        // step reduces to x_1 = sqrt(abar_1) x_0.
        let s = two_step_schedule();
        let stub = ZeroPredictor { dim: 1 };
        let out = ddim_invert_step(
            &stub,
            &GuidedNoiseSpec::unconditional(),
            &s,
            &Latent::new(vec![2.0], 0),
            1,
        )
        .unwrap();
        assert_relative_eq!(out.x[0], 0.64f64.sqrt() * 2.0, max_relative = 1e-15);
    }

    #[test]
    fn strength_one_recovers_conditional_and_zero_recovers_unconditional() {
        let s = NoiseSchedule::linear_beta(50, 0.002, 0.25).unwrap();
        let m = two_component_1d();
        let x = Latent::new(vec![0.7], 20);
        let e_c = guided_eps(&m, &GuidedNoiseSpec::conditional("right"), &s, &x).unwrap();
        let e_u = guided_eps(&m, &GuidedNoiseSpec::unconditional(), &s, &x).unwrap();
        let e_w1 = guided_eps(&m, &GuidedNoiseSpec::cfg(1.0, "right").unwrap(), &s, &x).unwrap();
        let e_g1 = guided_eps(&m, &GuidedNoiseSpec::mix(1.0, "right").unwrap(), &s, &x).unwrap();
        let e_w0 = guided_eps(&m, &GuidedNoiseSpec::cfg(0.0, "right").unwrap(), &s, &x).unwrap();
        assert_relative_eq!(e_w1[0], e_c[0], max_relative = 1e-14);
        assert_relative_eq!(e_g1[0], e_c[0], max_relative = 1e-14);
        assert_eq!(e_w0, e_u, "w = 0 adds an exact zero correction");
        // Negative strengths are rejected at construction.
        assert!(GuidedNoiseSpec::cfg(-0.5, "right").is_err());
        assert!(GuidedNoiseSpec::mix(f64::NAN, "right").is_err());
        // Modes that need a condition fail without one.
        let broken = GuidedNoiseSpec {
            mode: NoiseMode::Cfg { w: 2.0 },
            condition: None,
        };
        assert!(guided_eps(&m, &broken, &s, &x).is_err());
    }

    #[test]
    fn uniform_condition_blend_equals_unconditional() {
        // The "uniform" condition reweights to the unconditional weights, so
        // eps_c == eps_u and any blend strength returns eps_u.
        let s = NoiseSchedule::linear_beta(50, 0.002, 0.25).unwrap();
        let m = two_component_1d();
        let x = Latent::new(vec![-1.3], 33);
        let e_u = guided_eps(&m, &GuidedNoiseSpec::unconditional(), &s, &x).unwrap();
        for g in [0.0, 1.0, 2.0, 7.5] {
            let e = guided_eps(&m, &GuidedNoiseSpec::mix(g, "uniform").unwrap(), &s, &x).unwrap();
            assert_abs_diff_eq!(e[0], e_u[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn adjacent_round_trip_error_is_small() {
        // Inverting one step and denoising back moves the point only by the
        // prediction drift across the step.  Worst relative error over a
        // [-3, 3] grid and all interior timesteps stays below 1e-2 on this
        // desk-scale schedule (measured ceiling is about 3.3e-3).
        let s = NoiseSchedule::linear_beta(50, 0.002, 0.25).unwrap();
        let m = two_component_1d();
        let spec = GuidedNoiseSpec::unconditional();
        let mut worst = 0.0f64;
        for t in 1..50 {
            let mut xv = -3.0;
            while xv <= 3.0 {
                let x = Latent::new(vec![xv], t);
                let up = ddim_invert_step(&m, &spec, &s, &x, t + 1).unwrap();
                let back = ddim_step(&m, &spec, &s, &up, t).unwrap();
                let rel = (back.x[0] - xv).abs() / xv.abs().max(1.0);
                worst = worst.max(rel);
                xv += 0.5;
            }
        }
        assert!(
            worst < 1e-2,
            "adjacent inversion round-trip relative error {worst} should stay below 1e-2"
        );
    }

    #[test]
    fn interval_solver_refines_toward_reference() {
        // Transport 800 -> 600 on a 1000-step schedule at increasing
        // resolution; errors against a 200-step reference should shrink at
        // first order.  Slope is fitted on log error versus log step count.
        let s = NoiseSchedule::linear_beta(1000, 1e-4, 0.02).unwrap();
        let m = two_component_1d();
        let spec = GuidedNoiseSpec::unconditional();
        let x = Latent::new(vec![0.8], 800);
        let reference = solve_interval(
            &m,
            &spec,
            &s,
            &x,
            600,
            IntervalSolverConfig { inner_steps: 200 },
        )
        .unwrap();
        let mut lns = Vec::new();
        let mut lne = Vec::new();
        for inner in [1usize, 2, 4, 8, 16] {
            let y = solve_interval(
                &m,
                &spec,
                &s,
                &x,
                600,
                IntervalSolverConfig { inner_steps: inner },
            )
            .unwrap();
            let err = (y.x[0] - reference.x[0]).abs();
            assert!(err > 0.0);
            lns.push((inner as f64).ln());
            lne.push(err.ln());
        }
        // Least-squares slope of ln(err) on ln(inner); first-order
        // convergence makes it about -1.
        let n = lns.len() as f64;
        let mx = lns.iter().sum::<f64>() / n;
        let my = lne.iter().sum::<f64>() / n;
        let sxy: f64 = lns.iter().zip(&lne).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = lns.iter().map(|a| (a - mx) * (a - mx)).sum();
        let slope = sxy / sxx;
        assert!(
            -slope >= 0.9,
            "expected at least first-order refinement, got order {}",
            -slope
        );
        // Errors decrease monotonically with resolution.
        for w in lne.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn interval_solver_step_counts_follow_the_ceiling_rule() {
        let s = NoiseSchedule::linear_beta(100, 0.001, 0.13).unwrap();
        let m = two_component_1d();
        let metered = Metered::new(&m);
        let spec = GuidedNoiseSpec::unconditional();
        // span 7, inner 3 -> sub-span 3 -> steps 3, 3, 1: three evaluations.
        let x = Latent::new(vec![0.4], 50);
        solve_interval(
            &metered,
            &spec,
            &s,
            &x,
            43,
            IntervalSolverConfig { inner_steps: 3 },
        )
        .unwrap();
        assert_eq!(metered.nfe(), 3);
        // span 8, inner 4 -> sub-span 2 -> exactly 4 steps.
        metered.reset();
        solve_interval(
            &metered,
            &spec,
            &s,
            &x,
            58,
            IntervalSolverConfig { inner_steps: 4 },
        )
        .unwrap();
        assert_eq!(metered.nfe(), 4);
        // span 5, inner 4 -> sub-span 2 -> 3 steps (fewer than requested).
        metered.reset();
        solve_interval(
            &metered,
            &spec,
            &s,
            &x,
            45,
            IntervalSolverConfig { inner_steps: 4 },
        )
        .unwrap();
        assert_eq!(metered.nfe(), 3);
        // inner = 1 is a single step identical to ddim_step.
        metered.reset();
        let via_solver = solve_interval(
            &metered,
            &spec,
            &s,
            &x,
            43,
            IntervalSolverConfig { inner_steps: 1 },
        )
        .unwrap();
        assert_eq!(metered.nfe(), 1);
        let direct = ddim_step(&m, &spec, &s, &x, 43).unwrap();
        assert_eq!(via_solver.x, direct.x);
        // Degenerate requests are rejected.
        assert!(solve_interval(&m, &spec, &s, &x, 50, IntervalSolverConfig::default()).is_err());
        assert!(solve_interval(
            &m,
            &spec,
            &s,
            &x,
            43,
            IntervalSolverConfig { inner_steps: 0 }
        )
        .is_err());
    }

    #[test]
    fn ancestral_step_matches_posterior_formula() {
        // alpha_2 = 0.75, abar_2 = 0.375, abar_1 = 0.5: posterior variance is
        // (1 - 0.75)(1 - 0.5)/(1 - 0.375) = 0.2.  Reconstruct the noise draw
        // with the same generator to check the full update bitwise.
        let s = NoiseSchedule::from_alphas(vec![0.5, 0.75]).unwrap();
        let stub = ZeroPredictor { dim: 2 };
        let x = Latent::new(vec![1.0, -0.5], 2);
        let mut rng = derived_rng(21, &[4]);
        let out = ddpm_step(&stub, &GuidedNoiseSpec::unconditional(), &s, &x, &mut rng).unwrap();
        let mut rng_check = derived_rng(21, &[4]);
        let z = standard_normal_vec(&mut rng_check, 2);
        for (oj, (xj, zj)) in out.x.iter().zip(x.x.iter().zip(&z)) {
            let mean = xj / 0.75f64.sqrt();
            let expect = mean + 0.2f64.sqrt() * zj;
            assert_relative_eq!(*oj, expect, max_relative = 1e-14);
        }
        assert_eq!(out.t, 1);
    }

    #[test]
    fn final_ancestral_step_is_deterministic() {
        // At t = 1 the posterior variance is exactly zero (abar_0 = 1), so
        // two different generators produce the same output and no randomness
        // is consumed.
        let s = NoiseSchedule::from_alphas(vec![0.5, 0.75]).unwrap();
        let m = single_standard(1);
        let x = Latent::new(vec![0.9], 1);
        let mut rng_a = derived_rng(1, &[0]);
        let mut rng_b = derived_rng(2, &[1]);
        let a = ddpm_step(&m, &GuidedNoiseSpec::unconditional(), &s, &x, &mut rng_a).unwrap();
        let b = ddpm_step(&m, &GuidedNoiseSpec::unconditional(), &s, &x, &mut rng_b).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.t, 0);
        // And the mean matches the hand formula (eps = sqrt(1 - abar_1) x).
        let eps = (1.0f64 - 0.5).sqrt() * 0.9;
        let mean = (0.9 - (1.0 - 0.5) / (1.0f64 - 0.5).sqrt() * eps) / 0.5f64.sqrt();
        assert_relative_eq!(a.x[0], mean, max_relative = 1e-14);
    }

    #[test]
    fn ddpm_step_from_zero_is_rejected() {
        let s = NoiseSchedule::from_alphas(vec![0.5, 0.75]).unwrap();
        let m = single_standard(1);
        let mut rng = derived_rng(5, &[0]);
        assert!(ddpm_step(
            &m,
            &GuidedNoiseSpec::unconditional(),
            &s,
            &Latent::new(vec![0.1], 0),
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn guided_step_reduces_to_unconditional_at_zero_strength() {
        let s = NoiseSchedule::linear_beta(50, 0.002, 0.25).unwrap();
        let m = two_component_1d();
        let x = Latent::new(vec![1.1], 30);
        let guided = cfgpp_denoise_step(&m, "right", 0.0, &s, &x).unwrap();
        let plain = ddim_step(&m, &GuidedNoiseSpec::unconditional(), &s, &x, 29).unwrap();
        assert_abs_diff_eq!(guided.x[0], plain.x[0], epsilon = 1e-14);
        // Equal branch predictions also collapse the correction.
        let collapsed = cfgpp_denoise_step(&m, "uniform", 0.6, &s, &x).unwrap();
        assert_abs_diff_eq!(collapsed.x[0], plain.x[0], epsilon = 1e-13);
        assert!(cfgpp_denoise_step(&m, "right", -1.0, &s, &x).is_err());
    }

    #[test]
    fn cfg_step_decomposes_into_shift_then_unconditional_update() {
        // For an adjacent step, guiding with strength w equals shifting the
        // state by -w * xi_t * (eps_c - eps_u) and then running the plain
        // update with the unconditional prediction from the original point.
        let s = NoiseSchedule::linear_beta(50, 0.002, 0.25).unwrap();
        let m = two_component_1d();
        let w = 5.5;
        for t in [2usize, 17, 34, 50] {
            for xv in [-2.1, -0.4, 0.9, 2.6] {
                let x = Latent::new(vec![xv], t);
                let direct = ddim_step(
                    &m,
                    &GuidedNoiseSpec::cfg(w, "right").unwrap(),
                    &s,
                    &x,
                    t - 1,
                )
                .unwrap();
                let (c, u) = m.eps_pair(&s, &x, "right").unwrap();
                let shifted = Latent::new(vec![xv - w * s.xi(t) * (c[0] - u[0])], t);
                let via_shift = ddim_update_with(&s, &shifted, t - 1, &u).unwrap();
                assert!(
                    (direct.x[0] - via_shift.x[0]).abs() < 1e-10,
                    "decomposition mismatch at t={t}, x={xv}: {} vs {}",
                    direct.x[0],
                    via_shift.x[0]
                );
            }
        }
    }

    #[test]
    fn noise_corrected_step_decomposes_with_the_full_coefficient() {
        // The noise-corrected guided step equals shifting by
        // -lambda * sqrt(1 - abar_t) * (eps_c - eps_u) and then running the
        // unconditional-form update from the original prediction.
        let s = NoiseSchedule::linear_beta(50, 0.002, 0.25).unwrap();
        let m = two_component_1d();
        let lambda = 0.6;
        for t in [1usize, 9, 25, 41, 50] {
            for xv in [-1.7, 0.2, 1.4, 3.0] {
                let x = Latent::new(vec![xv], t);
                let direct = cfgpp_denoise_step(&m, "right", lambda, &s, &x).unwrap();
                let (c, u) = m.eps_pair(&s, &x, "right").unwrap();
                let shifted = Latent::new(vec![xv - lambda * s.xi_tilde(t) * (c[0] - u[0])], t);
                let via_shift = ddim_update_with(&s, &shifted, t - 1, &u).unwrap();
                assert!(
                    (direct.x[0] - via_shift.x[0]).abs() < 1e-12,
                    "decomposition mismatch at t={t}, x={xv}: {} vs {}",
                    direct.x[0],
                    via_shift.x[0]
                );
            }
        }
    }

    #[test]
    fn update_with_explicit_coefficients_agrees() {
        // The adjacent-step update can be written with explicit coefficients:
        // x_{t-1} = sqrt(abar_{t-1}/abar_t) x + (sqrt(1 - abar_{t-1})
        //           - sqrt((1 - abar_t)/alpha_t)) eps.
        let s = NoiseSchedule::linear_beta(60, 0.0015, 0.21).unwrap();
        let m = two_component_1d();
        for t in [1usize, 15, 42, 60] {
            let ab = s.alpha_bar(t);
            let ab_prev = s.alpha_bar(t - 1);
            let a = s.alpha(t);
            for xv in [-2.4, 0.5, 1.9] {
                let x = Latent::new(vec![xv], t);
                let eps = m.eps(&s, &x, None).unwrap();
                let out = ddim_update_with(&s, &x, t - 1, &eps).unwrap();
                let explicit = (ab_prev / ab).sqrt() * xv
                    + ((1.0 - ab_prev).sqrt() - ((1.0 - ab) / a).sqrt()) * eps[0];
                assert!(
                    (out.x[0] - explicit).abs() < 1e-12,
                    "explicit-coefficient mismatch at t={t}: {} vs {explicit}",
                    out.x[0]
                );
            }
        }
    }

    #[test]
    fn metered_counts_guided_steps_as_single_evaluations() {
        let s = NoiseSchedule::linear_beta(50, 0.002, 0.25).unwrap();
        let m = two_component_1d();
        let metered = Metered::new(&m);
        let x = Latent::new(vec![0.3], 10);
        ddim_step(
            &metered,
            &GuidedNoiseSpec::cfg(5.5, "right").unwrap(),
            &s,
            &x,
            9,
        )
        .unwrap();
        assert_eq!(metered.nfe(), 1, "a guided step is one evaluation point");
        cfgpp_denoise_step(&metered, "right", 0.6, &s, &x).unwrap();
        assert_eq!(metered.nfe(), 2);
        // Noise injection consumes no model evaluations.
        let mut rng = derived_rng(3, &[1]);
        forward_noise(&s, &x, &mut rng).unwrap();
        assert_eq!(metered.nfe(), 2);
    }
}
