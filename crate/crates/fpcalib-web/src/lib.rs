//! Browser bindings for the guidance-calibration library.
//!
//! Each export is a thin JSON-string interface over [`fpcalib`]: inputs are
//! scalars, the return value is a JSON object (or `{"error": message}` when
//! validation fails), and all numerical work happens in the core crate. The
//! same functions compile natively, so the bindings are tested with plain
//! `cargo test`; compiled to `wasm32-unknown-unknown` they become the module
//! behind `web/index.html`.
//!
//! Exports:
//!
//! - [`schedule_curves`]: the discrete noise schedule and every derived
//!   coefficient curve (`alpha_bar`, guidance step sizes `xi`/`xi_tilde`,
//!   probability-flow coefficients `lambda`/`mu`).
//! - [`guided_trajectory`]: one guided denoising run of a chosen method over
//!   a fixed two-component planar mixture, with the per-step prediction-gap
//!   series and the evaluation meter.
//! - [`bound_curve`]: the continuous relaxation `g(beta) = 2 L^2 beta^2 +
//!   C1 r^(2 beta N)` of the saturation bound, with its stationary point.

use std::collections::BTreeMap;

use fpcalib::analysis::{bound_derivative, optimal_beta_continuous};
use fpcalib::guidance::{
    plan_stage_allocation, run_cfg_xk, run_cfgpp_xk, run_fsg, run_resampling, run_zsampling,
    RunOptions, TrajectoryRecord,
};
use fpcalib::model::{sample_terminal, Component, ConditionalGmm, Latent};
use fpcalib::rng::derived_rng;
use fpcalib::schedule::NoiseSchedule;
use fpcalib::{Error, Result};
use serde::Serialize;

#[cfg(target_arch = "wasm32")]
use wasm_bindgen::prelude::wasm_bindgen;

/// Serializes a result as JSON: the value itself on success, otherwise
/// `{"error": message}`.
fn to_json<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| {
            format!("{{\"error\":{}}}", serde_json::Value::from(e.to_string()))
        }),
        Err(e) => format!("{{\"error\":{}}}", serde_json::Value::from(e.to_string())),
    }
}

/// All curves derived from a linear-beta schedule, sampled on `t = 1..=T`.
#[derive(Serialize)]
struct ScheduleCurves {
    t: Vec<usize>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    xi: Vec<f64>,
    xi_tilde: Vec<f64>,
    lambda: Vec<f64>,
    mu: Vec<f64>,
}

fn schedule_curves_impl(t_max: u32, beta_start: f64, beta_end: f64) -> Result<ScheduleCurves> {
    let s = NoiseSchedule::linear_beta(t_max as usize, beta_start, beta_end)?;
    let coeffs = s.ode_coefficients();
    let ts: Vec<usize> = (1..=s.t_max()).collect();
    Ok(ScheduleCurves {
        alpha: ts.iter().map(|&t| s.alpha(t)).collect(),
        alpha_bar: ts.iter().map(|&t| s.alpha_bar(t)).collect(),
        xi: ts.iter().map(|&t| s.xi(t)).collect(),
        xi_tilde: ts.iter().map(|&t| s.xi_tilde(t)).collect(),
        lambda: ts.iter().map(|&t| coeffs.lambda(t)).collect(),
        mu: ts.iter().map(|&t| coeffs.mu(t)).collect(),
        t: ts,
    })
}

/// JSON curves of a `T`-step linear-beta schedule: `t`, `alpha`,
/// `alpha_bar`, `xi`, `xi_tilde`, `lambda`, `mu`, each an array of length
/// `T`.
#[cfg_attr(target_arch = "wasm32", wasm_bindgen)]
pub fn schedule_curves(t_max: u32, beta_start: f64, beta_end: f64) -> String {
    to_json(schedule_curves_impl(t_max, beta_start, beta_end))
}

/// Number of denoising steps in the fixed demonstration setup.
const DEMO_T: usize = 50;

/// The fixed planar demonstration model: an equal two-component mixture with
/// means `(-2, -1)` and `(2, 1)`, unit variance, and one-hot conditions
/// `left` / `right`.
fn demo_model() -> Result<(ConditionalGmm, NoiseSchedule)> {
    let components = vec![
        Component {
            weight: 0.5,
            mean: vec![-2.0, -1.0],
            variance: 1.0,
        },
        Component {
            weight: 0.5,
            mean: vec![2.0, 1.0],
            variance: 1.0,
        },
    ];
    let mut conditions = BTreeMap::new();
    conditions.insert("left".to_string(), vec![1.0, 0.0]);
    conditions.insert("right".to_string(), vec![0.0, 1.0]);
    let model = ConditionalGmm::new(components, conditions)?;
    let s = NoiseSchedule::linear_beta(DEMO_T, 0.002, 0.25)?;
    Ok((model, s))
}

/// One plotted state of a trajectory.
#[derive(Serialize)]
struct TrajectoryPoint {
    t: usize,
    x: Vec<f64>,
}

/// A guided run in a form a canvas can draw directly.
#[derive(Serialize)]
struct TrajectoryView {
    method: String,
    condition: String,
    seed: u32,
    /// States from the terminal latent (t = T) down to the sample (t = 0):
    /// the calibrated latent of every step, bracketed by start and end.
    points: Vec<TrajectoryPoint>,
    /// Squared conditional/unconditional prediction gap per step, for
    /// `t = T, T-1, ..., 1`.
    gaps: Vec<f64>,
    nfe_total: usize,
    nfe_calibration: usize,
    nfe_denoise: usize,
    /// Component means of the demonstration mixture, keyed by the condition
    /// that selects them.
    targets: BTreeMap<String, Vec<f64>>,
}

fn trajectory_view(
    method: &str,
    condition: &str,
    seed: u32,
    record: TrajectoryRecord,
    x_init: Latent,
) -> TrajectoryView {
    let mut points = vec![TrajectoryPoint {
        t: x_init.t,
        x: x_init.x,
    }];
    if let Some(latents) = &record.latents {
        points.extend(latents.iter().map(|l| TrajectoryPoint {
            t: l.t,
            x: l.x.clone(),
        }));
    }
    points.push(TrajectoryPoint {
        t: 0,
        x: record.final_x.clone(),
    });
    let mut targets = BTreeMap::new();
    targets.insert("left".to_string(), vec![-2.0, -1.0]);
    targets.insert("right".to_string(), vec![2.0, 1.0]);
    TrajectoryView {
        method: method.to_string(),
        condition: condition.to_string(),
        seed,
        points,
        gaps: record.gaps,
        nfe_total: record.nfe_total,
        nfe_calibration: record.nfe_calibration,
        nfe_denoise: record.nfe_denoise,
        targets,
    }
}

fn guided_trajectory_impl(
    method: &str,
    condition: &str,
    strength: f64,
    gamma: f64,
    seed: u32,
) -> Result<TrajectoryView> {
    if !(strength.is_finite() && strength >= 0.0) {
        return Err(Error::invalid(format!(
            "strength must be finite and nonnegative, got {strength}"
        )));
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::invalid(format!(
            "gamma must be finite and nonnegative, got {gamma}"
        )));
    }
    let (model, s) = demo_model()?;
    let mut rng = derived_rng(seed as u64, &[0]);
    let x_init = sample_terminal(2, s.t_max(), &mut rng);
    let opts = RunOptions {
        record_latents: true,
        seed: seed as u64,
        ..RunOptions::default()
    };
    // Reflection needs one inversion step of headroom, so the terminal
    // timestep cannot be active.
    let every_step: Vec<usize> = (1..s.t_max()).collect();
    let record = match method {
        "cfg" => run_cfg_xk(&model, &s, condition, strength, 1, &x_init, &opts)?,
        "cfgpp" => run_cfgpp_xk(&model, &s, condition, strength, 1, &x_init, &opts)?,
        "zsampling" => run_zsampling(
            &model,
            &s,
            condition,
            strength,
            gamma,
            strength,
            &every_step,
            &x_init,
            &opts,
        )?,
        "resampling" => run_resampling(
            &model,
            &s,
            condition,
            strength,
            gamma,
            &every_step,
            &x_init,
            &opts,
        )?,
        "fsg" => {
            let plan = plan_stage_allocation(s.t_max(), 70, [3.0, 2.0, 1.0], strength, gamma)?;
            run_fsg(&model, &s, condition, &plan, &x_init, &opts)?
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown method {other:?}; expected cfg, cfgpp, zsampling, resampling, or fsg"
            )))
        }
    };
    Ok(trajectory_view(method, condition, seed, record, x_init))
}

/// Runs one guided denoising trajectory of `method` (`cfg`, `cfgpp`,
/// `zsampling`, `resampling`, or `fsg`) over the fixed planar two-component
/// mixture and returns it as JSON.
///
/// `strength` is the guidance strength (`w` for extrapolating methods,
/// `lambda` for interpolating ones); `gamma` is the reflection distance used
/// by `zsampling`, `resampling`, and `fsg` and is ignored by the rest.
/// Z-sampling and resampling reflect at every non-terminal step; `fsg` plans a
/// 70-evaluation budget over early/mid/late stages in a `3:2:1` ratio. The
/// reply carries the visited states, the per-step prediction-gap series, and
/// the evaluation meter.
#[cfg_attr(target_arch = "wasm32", wasm_bindgen)]
pub fn guided_trajectory(
    method: &str,
    condition: &str,
    strength: f64,
    gamma: f64,
    seed: u32,
) -> String {
    to_json(guided_trajectory_impl(
        method, condition, strength, gamma, seed,
    ))
}

/// The continuous bound relaxation sampled on a grid, with its stationary
/// point.
#[derive(Serialize)]
struct BoundCurve {
    beta: Vec<f64>,
    g: Vec<f64>,
    beta_star: f64,
    g_star: f64,
    /// Whether the derivative actually changes sign on `(0, 1)`; when it
    /// never turns positive the reported stationary point sits at the
    /// `beta = 1` boundary.
    interior: bool,
}

/// `2 L^2 beta^2 + C1 r^(2 beta N)` — the antiderivative matching
/// [`bound_derivative`] up to the `beta`-free terms of the full bound.
fn g_relaxed(beta: f64, n: usize, c1: f64, l: f64, r: f64) -> f64 {
    2.0 * l * l * beta * beta + c1 * r.powf(2.0 * beta * n as f64)
}

fn bound_curve_impl(n: u32, c1: f64, l: f64, r: f64, points: u32) -> Result<BoundCurve> {
    if n == 0 {
        return Err(Error::invalid("iteration budget N must be positive"));
    }
    if !(c1.is_finite() && c1 > 0.0) {
        return Err(Error::invalid(format!("C1 must be positive, got {c1}")));
    }
    if !(l.is_finite() && l >= 0.0) {
        return Err(Error::invalid(format!(
            "smoothness L must be nonnegative, got {l}"
        )));
    }
    if !(r.is_finite() && 0.0 < r && r < 1.0) {
        return Err(Error::invalid(format!(
            "contraction rate r must lie in (0, 1), got {r}"
        )));
    }
    if !(2..=4096).contains(&points) {
        return Err(Error::invalid(format!(
            "grid size must lie in [2, 4096], got {points}"
        )));
    }
    let n_us = n as usize;
    let lo = 1e-4;
    let step = (1.0 - lo) / (points - 1) as f64;
    let beta: Vec<f64> = (0..points).map(|i| lo + step * i as f64).collect();
    let g: Vec<f64> = beta.iter().map(|&b| g_relaxed(b, n_us, c1, l, r)).collect();
    let beta_star = optimal_beta_continuous(n_us, c1, l, r);
    let g_star = g_relaxed(beta_star, n_us, c1, l, r);
    let interior =
        bound_derivative(lo, n_us, c1, l, r) < 0.0 && bound_derivative(1.0, n_us, c1, l, r) > 0.0;
    Ok(BoundCurve {
        beta,
        g,
        beta_star,
        g_star,
        interior,
    })
}

/// Samples the continuous relaxation of the saturation bound,
/// `g(beta) = 2 L^2 beta^2 + C1 r^(2 beta N)`, on `points` equispaced
/// budget fractions in `[1e-4, 1]`, and locates its stationary point.
///
/// Returns JSON with `beta` and `g` arrays, the stationary point
/// `beta_star` with value `g_star`, and `interior`, which is false when the
/// derivative never changes sign and the minimum sits on the boundary.
#[cfg_attr(target_arch = "wasm32", wasm_bindgen)]
pub fn bound_curve(n: u32, c1: f64, l: f64, r: f64, points: u32) -> String {
    to_json(bound_curve_impl(n, c1, l, r, points))
}
