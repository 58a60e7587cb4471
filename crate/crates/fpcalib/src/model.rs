//! Gaussian-mixture data models with exact noise predictors.
//!
//! A [`ConditionalGmm`] is an isotropic Gaussian mixture over `R^d` together
//! with a set of named conditions, each a reweighting of the mixture
//! components.  Under the variance-preserving forward process the marginal at
//! time `t` is again a mixture — component `i` becomes
//! `N(sqrt(abar_t) m_i, (abar_t v_i + 1 - abar_t) I)` — so the score, the
//! noise prediction `eps = -sqrt(1 - abar_t) * score`, and the posterior mean
//! `E[x_0 | x_t]` are all available in closed form.  That makes every sampler
//! and estimator in this crate testable against exact quantities instead of a
//! trained network.

use std::cell::Cell;
use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{all_finite, dist_sq};
use crate::rng::standard_normal_vec;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Natural-log density threshold below the per-point maximum at which a
/// mixture component is dropped from responsibility sums.  `exp(-700)` is
/// still representable in `f64`, so dropped components are genuinely
/// negligible at working precision.
const LOG_DROP: f64 = 700.0;

/// A state vector tagged with its diffusion timestep.
///
/// `t` ranges over `0..=t_max` of the accompanying [`NoiseSchedule`]; `t = 0`
/// is clean data and `t = t_max` is (approximately) pure noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    /// State vector.
    pub x: Vec<f64>,
    /// Diffusion timestep the state lives at.
    pub t: usize,
}

impl Latent {
    /// Tags `x` with timestep `t`.
    pub fn new(x: Vec<f64>, t: usize) -> Self {
        Latent { x, t }
    }

    /// Dimension of the state vector.
    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// One isotropic component of a Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    /// Mixture weight; weights across a model sum to one.
    pub weight: f64,
    /// Component mean.
    pub mean: Vec<f64>,
    /// Isotropic variance (a single scalar for all coordinates).
    pub variance: f64,
}

/// Exact noise prediction over a Gaussian-mixture data model.
///
/// Implementors return the variance-preserving noise prediction for a latent
/// at its tagged timestep, optionally restricted to a named condition.  The
/// paired method exists so that meters can count a conditional/unconditional
/// pair at the same point as a single model evaluation: both branches share
/// one forward pass in the systems this models, and every budget in this
/// crate counts evaluation *points*.
pub trait NoisePredictor {
    /// Dimension of latents this predictor accepts.
    fn dim(&self) -> usize;

    /// Noise prediction at `x` (using its tagged timestep).
    ///
    /// Errors if `x.t == 0` (the prediction target is undefined on clean
    /// data; samplers treat `eps(x, 0)` as exactly zero without calling the
    /// predictor), if `x.t` exceeds the schedule length, or if `condition`
    /// names no known condition.
    fn eps(&self, s: &NoiseSchedule, x: &Latent, condition: Option<&str>) -> Result<Vec<f64>>;

    /// Conditional and unconditional predictions at the same point, in that
    /// order.  One evaluation point for budget purposes.
    fn eps_pair(
        &self,
        s: &NoiseSchedule,
        x: &Latent,
        condition: &str,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.eps(s, x, Some(condition))?;
        let u = self.eps(s, x, None)?;
        Ok((c, u))
    }
}

/// An isotropic Gaussian mixture with named conditional reweightings.
///
/// Conditions are stored in a sorted map so serialization and iteration order
/// are stable across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGmm {
    dim: usize,
    components: Vec<Component>,
    conditions: BTreeMap<String, Vec<f64>>,
}

impl ConditionalGmm {
    /// Builds a model from components and named condition reweightings.
    ///
    /// Validates that there is at least one component, that all means share
    /// one dimension, that variances are positive and finite, that the
    /// unconditional weights are nonnegative and sum to one (within `1e-12`),
    /// and that every condition vector has one nonnegative entry per
    /// component and also sums to one.
    pub fn new(components: Vec<Component>, conditions: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::invalid("model needs at least one component"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::invalid("component means must be nonempty"));
        }
        let mut weight_sum = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::invalid(format!(
                    "component {i} has dimension {} but component 0 has {dim}",
                    c.mean.len()
                )));
            }
            if !c.mean.iter().all(|m| m.is_finite()) {
                return Err(Error::invalid(format!("component {i} mean is not finite")));
            }
            if !(c.variance.is_finite() && c.variance > 0.0) {
                return Err(Error::invalid(format!(
                    "component {i} variance must be positive and finite, got {}",
                    c.variance
                )));
            }
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(Error::invalid(format!(
                    "component {i} weight must be nonnegative, got {}",
                    c.weight
                )));
            }
            weight_sum += c.weight;
        }
        if (weight_sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "component weights must sum to 1, got {weight_sum}"
            )));
        }
        for (name, w) in &conditions {
            if w.len() != components.len() {
                return Err(Error::invalid(format!(
                    "condition `{name}` has {} weights for {} components",
                    w.len(),
                    components.len()
                )));
            }
            if !w.iter().all(|v| v.is_finite() && *v >= 0.0) {
                return Err(Error::invalid(format!(
                    "condition `{name}` weights must be nonnegative"
                )));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!(
                    "condition `{name}` weights must sum to 1, got {sum}"
                )));
            }
        }
        Ok(ConditionalGmm {
            dim,
            components,
            conditions,
        })
    }

    /// Unconditional mixture components.
    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Names of the available conditions, in sorted order.
    pub fn condition_names(&self) -> impl Iterator<Item = &str> {
        self.conditions.keys().map(String::as_str)
    }

    /// Component weights assigned by a named condition.
    pub fn condition_weights(&self, name: &str) -> Result<&[f64]> {
        self.conditions
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownCondition(name.to_string()))
    }

    /// Component weights under `condition` (`None` = unconditional).
    fn weights(&self, condition: Option<&str>) -> Result<Vec<f64>> {
        match condition {
            None => Ok(self.components.iter().map(|c| c.weight).collect()),
            Some(name) => self
                .conditions
                .get(name)
                .cloned()
                .ok_or_else(|| Error::UnknownCondition(name.to_string())),
        }
    }

    /// The exact marginal mixture at time `t` under the forward process.
    ///
    /// Component `i` maps to mean `sqrt(abar_t) m_i` and variance
    /// `abar_t v_i + 1 - abar_t`; weights are taken from `condition`.
    /// `t` may be `0..=t_max`; at `t = 0` (where `abar_0 = 1`) the components
    /// come back unchanged apart from the reweighting.
    pub fn marginal_params(
        &self,
        s: &NoiseSchedule,
        t: usize,
        condition: Option<&str>,
    ) -> Result<Vec<Component>> {
        if t > s.t_max() {
            return Err(Error::invalid(format!(
                "timestep {t} exceeds schedule length {}",
                s.t_max()
            )));
        }
        let ab = s.alpha_bar(t);
        let weights = self.weights(condition)?;
        Ok(self
            .components
            .iter()
            .zip(weights)
            .map(|(c, w)| Component {
                weight: w,
                mean: c.mean.iter().map(|m| ab.sqrt() * m).collect(),
                variance: ab * c.variance + (1.0 - ab),
            })
            .collect())
    }

    /// Log density of the marginal mixture at time `t`, evaluated at `x`.
    ///
    /// Uses log-sum-exp over components; components whose log density falls
    /// more than 700 nats below the per-point maximum are dropped.
    pub fn log_density(
        &self,
        s: &NoiseSchedule,
        x: &[f64],
        t: usize,
        condition: Option<&str>,
    ) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "point has dimension {}, model has {}",
                x.len(),
                self.dim
            )));
        }
        let comps = self.marginal_params(s, t, condition)?;
        let logs = component_log_densities(&comps, x);
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let sum: f64 = logs
            .iter()
            .filter(|&&l| l >= max - LOG_DROP)
            .map(|l| (l - max).exp())
            .sum();
        Ok(max + sum.ln())
    }

    /// Posterior mean `E[x_0 | x_t]` under the marginal at time `t`.
    ///
    /// Computed directly from component responsibilities and the per-component
    /// Gaussian posterior; independent of [`NoisePredictor::eps`], so the two
    /// can be checked against each other through the identity
    /// `E[x_0 | x_t] = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
    pub fn posterior_mean(
        &self,
        s: &NoiseSchedule,
        x: &[f64],
        t: usize,
        condition: Option<&str>,
    ) -> Result<Vec<f64>> {
        if t == 0 || t > s.t_max() {
            return Err(Error::invalid(format!(
                "posterior mean needs 1 <= t <= {}, got {t}",
                s.t_max()
            )));
        }
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "point has dimension {}, model has {}",
                x.len(),
                self.dim
            )));
        }
        let ab = s.alpha_bar(t);
        let resp = self.responsibilities(s, x, t, condition)?;
        let mut out = vec![0.0; self.dim];
        for (c, r) in self.components.iter().zip(&resp) {
            if *r == 0.0 {
                continue;
            }
            // Per-component Gaussian posterior mean:
            //   m_i + sqrt(abar) v_i / (abar v_i + 1 - abar) * (x - sqrt(abar) m_i)
            let gain = ab.sqrt() * c.variance / (ab * c.variance + (1.0 - ab));
            for j in 0..self.dim {
                out[j] += r * (c.mean[j] + gain * (x[j] - ab.sqrt() * c.mean[j]));
            }
        }
        Ok(out)
    }

    /// Responsibilities of the marginal components at `(x, t)`.
    fn responsibilities(
        &self,
        s: &NoiseSchedule,
        x: &[f64],
        t: usize,
        condition: Option<&str>,
    ) -> Result<Vec<f64>> {
        let comps = self.marginal_params(s, t, condition)?;
        let logs = component_log_densities(&comps, x);
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Numerical {
                t,
                msg: "all mixture components vanished at the query point".into(),
            });
        }
        let mut resp: Vec<f64> = logs
            .iter()
            .map(|&l| {
                if l >= max - LOG_DROP {
                    (l - max).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = resp.iter().sum();
        for r in &mut resp {
            *r /= total;
        }
        Ok(resp)
    }

    /// Draws a clean data point from the (possibly reweighted) mixture.
    pub fn sample_x0(&self, condition: Option<&str>, rng: &mut ChaCha8Rng) -> Result<Latent> {
        use rand::Rng;
        let weights = self.weights(condition)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.components.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let c = &self.components[idx];
        let z = standard_normal_vec(rng, self.dim);
        let x = c
            .mean
            .iter()
            .zip(z)
            .map(|(m, zi)| m + c.variance.sqrt() * zi)
            .collect();
        Ok(Latent::new(x, 0))
    }
}

/// Per-component log densities `log w_i + log N(x; m_i, v_i I)`.
///
/// Zero-weight components get `-inf` and drop out of downstream sums.
fn component_log_densities(comps: &[Component], x: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    comps
        .iter()
        .map(|c| {
            if c.weight == 0.0 {
                return f64::NEG_INFINITY;
            }
            let sq = dist_sq(x, &c.mean);
            c.weight.ln()
                - 0.5 * sq / c.variance
                - 0.5 * d * (2.0 * std::f64::consts::PI * c.variance).ln()
        })
        .collect()
}

impl NoisePredictor for ConditionalGmm {
    fn dim(&self) -> usize {
        self.dim
    }

    /// Exact noise prediction `-sqrt(1 - abar_t) * grad log p_t(x)`.
    ///
    /// The score of the marginal mixture is the responsibility-weighted sum
    /// of per-component scores `(sqrt(abar_t) m_i - x) / (abar_t v_i + 1 - abar_t)`.
    fn eps(&self, s: &NoiseSchedule, x: &Latent, condition: Option<&str>) -> Result<Vec<f64>> {
        if x.t == 0 {
            return Err(Error::invalid(
                "noise prediction is undefined at t = 0; samplers use the exact zero limit instead",
            ));
        }
        if x.t > s.t_max() {
            return Err(Error::invalid(format!(
                "timestep {} exceeds schedule length {}",
                x.t,
                s.t_max()
            )));
        }
        if x.dim() != self.dim {
            return Err(Error::invalid(format!(
                "latent has dimension {}, model has {}",
                x.dim(),
                self.dim
            )));
        }
        let ab = s.alpha_bar(x.t);
        let comps = self.marginal_params(s, x.t, condition)?;
        let resp = self.responsibilities(s, &x.x, x.t, condition)?;
        let mut score = vec![0.0; self.dim];
        for (c, r) in comps.iter().zip(&resp) {
            if *r == 0.0 {
                continue;
            }
            for (sj, (mj, xj)) in score.iter_mut().zip(c.mean.iter().zip(&x.x)) {
                *sj += r * (mj - xj) / c.variance;
            }
        }
        let coef = (1.0 - ab).sqrt();
        let out: Vec<f64> = score.iter().map(|sj| -coef * sj).collect();
        if !all_finite(&out) {
            return Err(Error::Numerical {
                t: x.t,
                msg: "noise prediction is not finite".into(),
            });
        }
        Ok(out)
    }
}

/// A predictor wrapper that counts evaluation points.
///
/// Paired conditional/unconditional evaluations at the same point are charged
/// once, matching how guided samplers batch the two branches through a single
/// forward pass.  Diagnostics that must not affect budgets (for example gap
/// recording) should call the inner predictor directly.
pub struct Metered<'a> {
    inner: &'a dyn NoisePredictor,
    count: Cell<usize>,
}

impl<'a> Metered<'a> {
    /// Wraps `inner` with a fresh counter.
    pub fn new(inner: &'a dyn NoisePredictor) -> Self {
        Metered {
            inner,
            count: Cell::new(0),
        }
    }

    /// Evaluation points charged so far.
    pub fn nfe(&self) -> usize {
        self.count.get()
    }

    /// Resets the counter to zero.
    pub fn reset(&self) {
        self.count.set(0);
    }
}

impl NoisePredictor for Metered<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eps(&self, s: &NoiseSchedule, x: &Latent, condition: Option<&str>) -> Result<Vec<f64>> {
        let out = self.inner.eps(s, x, condition)?;
        self.count.set(self.count.get() + 1);
        Ok(out)
    }

    fn eps_pair(
        &self,
        s: &NoiseSchedule,
        x: &Latent,
        condition: &str,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.inner.eps_pair(s, x, condition)?;
        self.count.set(self.count.get() + 1);
        Ok(out)
    }
}

/// A predictor that always returns zero noise.
///
/// Useful for exercising sampler formulas in isolation: with zero noise the
/// generalized denoising update becomes a pure rescaling of the state.
pub struct ZeroPredictor {
    /// Dimension of latents this stub accepts.
    pub dim: usize,
}

impl NoisePredictor for ZeroPredictor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eps(&self, s: &NoiseSchedule, x: &Latent, _condition: Option<&str>) -> Result<Vec<f64>> {
        if x.t == 0 || x.t > s.t_max() {
            return Err(Error::invalid(format!(
                "timestep {} outside 1..={}",
                x.t,
                s.t_max()
            )));
        }
        Ok(vec![0.0; self.dim])
    }
}

/// One step of the forward noising chain: `x_{t+1} = sqrt(alpha_{t+1}) x_t +
/// sqrt(1 - alpha_{t+1}) z` with `z` standard normal.
///
/// Errors if `x.t >= t_max` (there is no timestep to move up to).
pub fn forward_noise(s: &NoiseSchedule, x: &Latent, rng: &mut ChaCha8Rng) -> Result<Latent> {
    if x.t >= s.t_max() {
        return Err(Error::invalid(format!(
            "forward noising from t = {} exceeds schedule length {}",
            x.t,
            s.t_max()
        )));
    }
    let a = s.alpha(x.t + 1);
    let z = standard_normal_vec(rng, x.dim());
    let out: Vec<f64> =
        x.x.iter()
            .zip(z)
            .map(|(xi, zi)| a.sqrt() * xi + (1.0 - a).sqrt() * zi)
            .collect();
    Ok(Latent::new(out, x.t + 1))
}

/// Draws a terminal latent `x_{t_max}` from the standard normal reference.
pub fn sample_terminal(dim: usize, t_max: usize, rng: &mut ChaCha8Rng) -> Latent {
    Latent::new(standard_normal_vec(rng, dim), t_max)
}
