//! Configuration file schema, validation, and hashing.
//!
//! A single TOML file describes an experiment: the noise schedule, the
//! Gaussian-mixture data model, and one section per command (`[run]`,
//! `[contraction]`, `[bound]`, `[golden]`, `[sweep]`, `[output]`).  Unknown
//! keys are rejected so typos surface as config errors rather than silently
//! falling back to defaults.  Every violation message names the offending
//! field, and the effective config (after command-line seed overrides) is
//! hashed so output files can be traced back to the exact inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use fpcalib::guidance::{
    plan_stage_allocation, DenoiseEval, IterationSchedule, OperatorKind, SamplerKind, StageEntry,
};
use fpcalib::model::{Component, ConditionalGmm};
use fpcalib::sampler::NoiseMode;
use fpcalib::schedule::NoiseSchedule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Errors surfaced to the process exit status.
///
/// Configuration problems exit with code 2, numerical failures during an
/// otherwise valid run with code 3, and I/O problems with code 1.
#[derive(Debug)]
pub enum CliError {
    /// The config file (or a flag) violates a documented invariant; the
    /// message names the field.
    Config(String),
    /// A numerical failure inside the library; the message carries the
    /// offending timestep.
    Numerical(String),
    /// Filesystem trouble reading the config or writing outputs.
    Io(String),
}

impl CliError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }

    /// Shorthand for a config violation at a named field.
    pub fn field(name: &str, msg: impl fmt::Display) -> Self {
        CliError::Config(format!("{name}: {msg}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl From<fpcalib::Error> for CliError {
    fn from(e: fpcalib::Error) -> Self {
        match e {
            fpcalib::Error::Numerical { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Specialized result alias for command-line code.
pub type CliResult<T> = Result<T, CliError>;

/// Linear-beta noise schedule parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    /// Number of timesteps `T`.
    pub t_max: usize,
    /// Per-step noise rate at `t = 1`.
    pub beta_start: f64,
    /// Per-step noise rate at `t = T`.
    pub beta_end: f64,
}

/// One mixture component.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSection {
    /// Unconditional mixture weight.
    pub weight: f64,
    /// Component mean.
    pub mean: Vec<f64>,
    /// Isotropic variance.
    pub variance: f64,
}

/// Gaussian-mixture data model with named condition reweightings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Mixture components.
    pub components: Vec<ComponentSection>,
    /// Condition name to per-component weights.
    pub conditions: BTreeMap<String, Vec<f64>>,
}

/// Guidance methods the trajectory driver knows how to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    /// Linear correction scaled by `xi(t)`, `k` times per step.
    Cfg,
    /// Linear correction scaled by `xi_tilde(t)`, `k` times per step.
    Cfgpp,
    /// Deterministic round-trip reflection at active steps.
    Zsampling,
    /// Stochastic round-trip reflection at active steps.
    Resampling,
    /// Look-ahead reflections on a staged iteration allocation.
    Fsg,
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MethodKind::Cfg => "cfg",
            MethodKind::Cfgpp => "cfgpp",
            MethodKind::Zsampling => "zsampling",
            MethodKind::Resampling => "resampling",
            MethodKind::Fsg => "fsg",
        };
        f.write_str(name)
    }
}

/// One look-ahead stage entry (explicit alternative to the planner).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    /// Timestep the iterations run at.
    pub t: usize,
    /// Number of reflection iterations.
    pub iterations: usize,
    /// Look-ahead span.
    pub dt: usize,
}

/// Trajectory-run parameters shared by `sample`, `gap`, and `sweep`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Guidance method.
    pub method: MethodKind,
    /// Condition the guidance targets.
    pub condition: String,
    /// Base seeds, one trajectory each.
    pub seeds: Vec<u64>,
    /// Denoising rule (deterministic by default).
    #[serde(default = "default_sampler")]
    pub sampler: SamplerKind,
    /// Where the denoising prediction is evaluated.
    #[serde(default = "default_denoise_eval")]
    pub denoise_eval: DenoiseEval,
    /// Record per-step latents in the trajectory file.
    #[serde(default)]
    pub record_latents: bool,
    /// Guidance strength for `cfg`, `zsampling`, and `resampling`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<f64>,
    /// Guidance strength for `cfgpp` and `fsg`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Blend strength of reflection legs (`zsampling`, `resampling`, `fsg`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Corrections per step for `cfg` and `cfgpp` (default 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Guidance strength of the inversion leg in `zsampling` (default 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reverse_strength: Option<f64>,
    /// Timesteps where `zsampling`/`resampling` reflect.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_steps: Option<Vec<usize>>,
    /// Explicit look-ahead allocation for `fsg`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<StageSection>>,
    /// Total evaluation budget for the `fsg` stage planner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    /// Early/mid/late split ratio for the planner (default `[3, 2, 1]`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<[f64; 3]>,
}

fn default_sampler() -> SamplerKind {
    SamplerKind::Ddim
}

fn default_denoise_eval() -> DenoiseEval {
    DenoiseEval::Algorithm
}

/// Operator families the `contraction` command can probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractionOperator {
    /// The identity map; its rate estimate is exactly one (a calibration
    /// check for the estimator itself).
    Identity,
    /// Linear correction scaled by `xi(t)`.
    LinearCfg,
    /// Linear correction scaled by `xi_tilde(t)`.
    LinearCfgpp,
    /// Deterministic round-trip reflection plus linear correction.
    Zsampling,
    /// Stochastic round-trip reflection plus linear correction.
    Resampling,
    /// Look-ahead reflection plus linear correction.
    Foresight,
}

impl fmt::Display for ContractionOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ContractionOperator::Identity => "identity",
            ContractionOperator::LinearCfg => "linear_cfg",
            ContractionOperator::LinearCfgpp => "linear_cfgpp",
            ContractionOperator::Zsampling => "zsampling",
            ContractionOperator::Resampling => "resampling",
            ContractionOperator::Foresight => "foresight",
        };
        f.write_str(name)
    }
}

/// Contraction-rate experiment parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractionSection {
    /// Operator family to probe.
    pub operator: ContractionOperator,
    /// Condition of the operator (unused by `identity`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    /// Guidance strength for the `xi`-scaled families.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<f64>,
    /// Guidance strength for the `xi_tilde`-scaled families.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Blend strength of reflection legs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Look-ahead span for `foresight` (legs run in unit steps).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<usize>,
    /// Inversion-leg strength for `zsampling` (default 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reverse_strength: Option<f64>,
    /// Timesteps to estimate the rate at.
    pub timesteps: Vec<usize>,
    /// Sample pairs per timestep.
    pub n_pairs: usize,
    /// Initial pair separation scale.
    pub perturbation_scale: f64,
    /// Base seed; each timestep derives its own stream from it.
    pub seed: u64,
    /// Condition the probe points are sampled under (unconditional when
    /// absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_condition: Option<String>,
}

/// Budget-allocation bound experiment parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSection {
    /// Total calibration-iteration budget `N`.
    pub n: usize,
    /// Condition the calibration round trips target.
    pub condition: String,
    /// Blend strength of the round-trip denoising legs.
    pub gamma: f64,
    /// Trajectories per feasible partition for the measured loss.
    pub n_trajectories: usize,
    /// Pairs per interval head for the contraction-rate estimate.
    pub n_pairs: usize,
    /// Initial pair separation for the rate estimate.
    pub perturbation_scale: f64,
    /// Base seed for rate estimation and trajectory starts.
    pub seed: u64,
    /// Upper Taylor-slack constant `C` (default 2).
    #[serde(default = "default_c_big")]
    pub c_big: f64,
    /// Lower slack constant `c` (default 0.5).
    #[serde(default = "default_c_small")]
    pub c_small: f64,
    /// Additive safety margin on estimated contraction rates (default 0.1).
    #[serde(default = "default_slack")]
    pub slack: f64,
    /// Pairs per timestep for the smoothness estimate (default 200).
    #[serde(default = "default_smoothness_pairs")]
    pub smoothness_pairs: usize,
    /// Optional externally supplied smoothness constant; skips estimation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
}

fn default_c_big() -> f64 {
    2.0
}

fn default_c_small() -> f64 {
    0.5
}

fn default_slack() -> f64 {
    0.1
}

fn default_smoothness_pairs() -> usize {
    200
}

/// Guidance mode of the golden-path denoising legs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldenGuidance {
    /// Pure conditional prediction.
    Conditional,
    /// Classifier-free extrapolation with strength `guidance_strength`.
    Cfg,
    /// Convex blend with strength `guidance_strength`.
    Mix,
}

/// Golden-path identifiability experiment parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenSection {
    /// Condition the probe samples are drawn from.
    pub condition_match: String,
    /// Competing condition scored against it.
    pub condition_mismatch: String,
    /// Inversion depth.
    pub t_star: usize,
    /// Number of paired trials.
    pub n_trials: usize,
    /// Base seed (each trial derives its own stream).
    pub seed: u64,
    /// Denoising-leg guidance mode (default pure conditional).
    #[serde(default = "default_golden_guidance")]
    pub guidance: GoldenGuidance,
    /// Strength for the `cfg` and `mix` modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_strength: Option<f64>,
}

fn default_golden_guidance() -> GoldenGuidance {
    GoldenGuidance::Conditional
}

/// Parameter axes the `sweep` command can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// `run.w` over trajectory runs.
    W,
    /// `run.lambda` over trajectory runs.
    Lambda,
    /// `run.gamma` over trajectory runs.
    Gamma,
    /// `contraction.dt` over foresight rate estimates.
    Dt,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SweepAxis::W => "w",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Gamma => "gamma",
            SweepAxis::Dt => "dt",
        };
        f.write_str(name)
    }
}

/// Parameter-sweep description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Which parameter to vary.
    pub axis: SweepAxis,
    /// Values the axis takes, one batch of runs per value.
    pub values: Vec<f64>,
}

/// Output location.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Directory the command writes into.
    pub dir: PathBuf,
}

/// A full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Noise schedule.
    pub schedule: ScheduleSection,
    /// Data model.
    pub model: ModelSection,
    /// Trajectory runs (`sample`, `gap`, and run-axis sweeps).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSection>,
    /// Contraction-rate experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contraction: Option<ContractionSection>,
    /// Budget-allocation bound experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundSection>,
    /// Golden-path identifiability experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub golden: Option<GoldenSection>,
    /// Parameter sweeps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    /// Output location (default `out/`, overridable with `--out`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSection>,
}

impl Config {
    /// Parses a config file, reporting parse problems as config errors.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{e}")))
    }

    /// Replaces `run.seeds` with a command-line override.
    pub fn apply_seed_override(&mut self, seeds: &[u64]) -> CliResult<()> {
        let run = self
            .run
            .as_mut()
            .ok_or_else(|| CliError::field("run", "seed override needs a [run] section"))?;
        if seeds.is_empty() {
            return Err(CliError::field(
                "run.seeds",
                "seed override must list at least one seed",
            ));
        }
        run.seeds = seeds.to_vec();
        Ok(())
    }

    /// Hash of the effective experiment description.
    ///
    /// The output location is excluded so the hash identifies the experiment
    /// itself, not where its files land.  Seed overrides are applied before
    /// hashing, so the hash pins the exact seeds that ran.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = None;
        let text = toml::to_string(&canonical).expect("config serializes to TOML");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            use std::fmt::Write;
            write!(hex, "{byte:02x}").expect("writing to a String cannot fail");
        }
        hex
    }

    /// Builds the noise schedule, attributing violations to `[schedule]`.
    pub fn build_schedule(&self) -> CliResult<NoiseSchedule> {
        NoiseSchedule::linear_beta(
            self.schedule.t_max,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )
        .map_err(|e| CliError::field("schedule", e))
    }

    /// Builds the data model, attributing violations to `[model]`.
    pub fn build_model(&self) -> CliResult<ConditionalGmm> {
        let components = self
            .model
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight,
                mean: c.mean.clone(),
                variance: c.variance,
            })
            .collect();
        ConditionalGmm::new(components, self.model.conditions.clone())
            .map_err(|e| CliError::field("model", e))
    }

    /// Returns the `[run]` section or a config error naming it.
    pub fn run_section(&self) -> CliResult<&RunSection> {
        self.run
            .as_ref()
            .ok_or_else(|| CliError::field("run", "this command needs a [run] section"))
    }

    /// Returns the `[contraction]` section or a config error naming it.
    pub fn contraction_section(&self) -> CliResult<&ContractionSection> {
        self.contraction.as_ref().ok_or_else(|| {
            CliError::field("contraction", "this command needs a [contraction] section")
        })
    }

    /// Returns the `[bound]` section or a config error naming it.
    pub fn bound_section(&self) -> CliResult<&BoundSection> {
        self.bound
            .as_ref()
            .ok_or_else(|| CliError::field("bound", "this command needs a [bound] section"))
    }

    /// Returns the `[golden]` section or a config error naming it.
    pub fn golden_section(&self) -> CliResult<&GoldenSection> {
        self.golden
            .as_ref()
            .ok_or_else(|| CliError::field("golden", "this command needs a [golden] section"))
    }

    /// Returns the `[sweep]` section or a config error naming it.
    pub fn sweep_section(&self) -> CliResult<&SweepSection> {
        self.sweep
            .as_ref()
            .ok_or_else(|| CliError::field("sweep", "this command needs a [sweep] section"))
    }

    /// Output directory: the `--out` flag, then `output.dir`, then `out/`.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        self.output
            .as_ref()
            .map(|o| o.dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Checks that a condition name exists in the model, naming `field`.
    pub fn check_condition(&self, field: &str, name: &str) -> CliResult<()> {
        if self.model.conditions.contains_key(name) {
            Ok(())
        } else {
            Err(CliError::field(
                field,
                format!("condition {name:?} is not declared under [model.conditions]"),
            ))
        }
    }
}

/// A validated trajectory-run request, ready to execute per seed.
#[derive(Debug, Clone)]
pub struct RunPlan {
    /// Guidance method.
    pub method: MethodKind,
    /// Target condition.
    pub condition: String,
    /// Seeds to run.
    pub seeds: Vec<u64>,
    /// Denoising rule.
    pub sampler: SamplerKind,
    /// Denoising evaluation point.
    pub denoise_eval: DenoiseEval,
    /// Record per-step latents.
    pub record_latents: bool,
    /// Strength of the linear correction (`w` or `lambda` per method).
    pub strength: f64,
    /// Corrections per step (linear methods).
    pub k: usize,
    /// Blend strength of reflection legs.
    pub gamma: f64,
    /// Inversion-leg strength (`zsampling`).
    pub reverse_strength: f64,
    /// Active reflection steps (`zsampling`, `resampling`), ascending.
    pub active_steps: Vec<usize>,
    /// Look-ahead allocation (`fsg`).
    pub allocation: Option<IterationSchedule>,
}

impl RunPlan {
    /// Validates `[run]` against the model and schedule.
    ///
    /// Checks that the method's parameters are present (absent ones are
    /// named in the error), that the condition exists, and that structural
    /// parameters (active steps, stage allocations) fit the schedule.
    pub fn from_config(cfg: &Config, s: &NoiseSchedule) -> CliResult<Self> {
        let run = cfg.run_section()?;
        cfg.check_condition("run.condition", &run.condition)?;
        if run.seeds.is_empty() {
            return Err(CliError::field(
                "run.seeds",
                "at least one seed is required",
            ));
        }
        let need = |field: &str, v: Option<f64>| -> CliResult<f64> {
            let v = v.ok_or_else(|| {
                CliError::field(
                    field,
                    format!("required by run.method = \"{}\"", run.method),
                )
            })?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(CliError::field(
                    field,
                    format!("must be finite and nonnegative, got {v}"),
                ));
            }
            Ok(v)
        };
        let k = run.k.unwrap_or(1);
        if let Some(r) = run.reverse_strength {
            if !(r.is_finite() && r >= 0.0) {
                return Err(CliError::field(
                    "run.reverse_strength",
                    format!("must be finite and nonnegative, got {r}"),
                ));
            }
        }
        let mut plan = RunPlan {
            method: run.method,
            condition: run.condition.clone(),
            seeds: run.seeds.clone(),
            sampler: run.sampler,
            denoise_eval: run.denoise_eval,
            record_latents: run.record_latents,
            strength: 0.0,
            k,
            gamma: 0.0,
            reverse_strength: run.reverse_strength.unwrap_or(0.0),
            active_steps: Vec::new(),
            allocation: None,
        };
        match run.method {
            MethodKind::Cfg | MethodKind::Cfgpp => {
                plan.strength = match run.method {
                    MethodKind::Cfg => need("run.w", run.w)?,
                    _ => need("run.lambda", run.lambda)?,
                };
                if k == 0 {
                    return Err(CliError::field("run.k", "must be at least 1"));
                }
            }
            MethodKind::Zsampling | MethodKind::Resampling => {
                plan.strength = need("run.w", run.w)?;
                plan.gamma = need("run.gamma", run.gamma)?;
                let steps = run.active_steps.as_ref().ok_or_else(|| {
                    CliError::field(
                        "run.active_steps",
                        format!("required by run.method = \"{}\"", run.method),
                    )
                })?;
                let mut sorted = steps.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != steps.len() {
                    return Err(CliError::field(
                        "run.active_steps",
                        "timesteps must be distinct",
                    ));
                }
                for &t in &sorted {
                    if t == 0 || t >= s.t_max() {
                        return Err(CliError::field(
                            "run.active_steps",
                            format!(
                                "reflection at t = {t} needs 1 <= t < {} so the round trip stays inside the schedule",
                                s.t_max()
                            ),
                        ));
                    }
                }
                plan.active_steps = sorted;
            }
            MethodKind::Fsg => {
                plan.strength = need("run.lambda", run.lambda)?;
                plan.gamma = need("run.gamma", run.gamma)?;
                let allocation = match (&run.stages, run.budget) {
                    (Some(_), Some(_)) => {
                        return Err(CliError::field(
                            "run.stages",
                            "give either explicit stages or a planner budget, not both",
                        ));
                    }
                    (None, None) => {
                        return Err(CliError::field(
                            "run.budget",
                            "fsg needs either run.stages or a planner budget",
                        ));
                    }
                    (Some(stages), None) => {
                        if run.ratio.is_some() {
                            return Err(CliError::field(
                                "run.ratio",
                                "the stage ratio only applies to the planner budget",
                            ));
                        }
                        let entries = stages
                            .iter()
                            .map(|e| StageEntry {
                                t: e.t,
                                iterations: e.iterations,
                                dt: e.dt,
                            })
                            .collect();
                        IterationSchedule::new(entries, plan.strength, plan.gamma, s.t_max())
                            .map_err(|e| CliError::field("run.stages", e))?
                    }
                    (None, Some(budget)) => {
                        let ratio = run.ratio.unwrap_or([3.0, 2.0, 1.0]);
                        plan_stage_allocation(s.t_max(), budget, ratio, plan.strength, plan.gamma)
                            .map_err(|e| CliError::field("run.budget", e))?
                    }
                };
                plan.allocation = Some(allocation);
            }
        }
        Ok(plan)
    }

    /// Evaluation cost of each step, aligned with the recorded gap series
    /// (`t = T, T-1, ..., 1`).
    ///
    /// Linear methods pay `k` per step; reflections add two per active step
    /// (`zsampling` also pays for its inversion leg, `resampling` gets the
    /// noising leg free); look-ahead iterations pay two per iteration unless
    /// the reflection touches `t = 0`, whose departing inversion is free.
    /// Re-evaluated denoising adds one per step.
    pub fn step_costs(&self, t_max: usize) -> Vec<usize> {
        let denoise = match self.denoise_eval {
            DenoiseEval::Algorithm => 0,
            DenoiseEval::Calibrated => 1,
        };
        (1..=t_max)
            .rev()
            .map(|t| {
                let calibration = match self.method {
                    MethodKind::Cfg | MethodKind::Cfgpp => self.k,
                    MethodKind::Zsampling => {
                        if self.active_steps.contains(&t) {
                            3
                        } else {
                            1
                        }
                    }
                    MethodKind::Resampling => {
                        if self.active_steps.contains(&t) {
                            2
                        } else {
                            1
                        }
                    }
                    MethodKind::Fsg => {
                        let alloc = self
                            .allocation
                            .as_ref()
                            .expect("fsg plans carry an allocation");
                        let extra: usize = alloc
                            .entries()
                            .iter()
                            .filter(|e| e.t == t)
                            .map(|e| e.iterations * if e.dt == e.t { 1 } else { 2 })
                            .sum();
                        1 + extra
                    }
                };
                calibration + denoise
            })
            .collect()
    }
}

/// Builds the contraction operator spec from `[contraction]`, naming absent
/// parameters.  Returns `None` for the identity operator.
pub fn contraction_operator(
    cfg: &Config,
    section: &ContractionSection,
) -> CliResult<Option<(OperatorKind, String)>> {
    let need = |field: &str, v: Option<f64>| -> CliResult<f64> {
        v.ok_or_else(|| {
            CliError::field(
                field,
                format!(
                    "required by contraction.operator = \"{}\"",
                    section.operator
                ),
            )
        })
    };
    let kind = match section.operator {
        ContractionOperator::Identity => return Ok(None),
        ContractionOperator::LinearCfg => OperatorKind::LinearCfg {
            w: need("contraction.w", section.w)?,
        },
        ContractionOperator::LinearCfgpp => OperatorKind::LinearCfgpp {
            lambda: need("contraction.lambda", section.lambda)?,
        },
        ContractionOperator::Zsampling => OperatorKind::Zsampling {
            w: need("contraction.w", section.w)?,
            gamma: need("contraction.gamma", section.gamma)?,
            reverse_strength: section.reverse_strength.unwrap_or(0.0),
        },
        ContractionOperator::Resampling => OperatorKind::Resampling {
            w: need("contraction.w", section.w)?,
            gamma: need("contraction.gamma", section.gamma)?,
        },
        ContractionOperator::Foresight => OperatorKind::Foresight {
            lambda: need("contraction.lambda", section.lambda)?,
            gamma: need("contraction.gamma", section.gamma)?,
            dt: section.dt.ok_or_else(|| {
                CliError::field(
                    "contraction.dt",
                    "required by contraction.operator = \"foresight\"",
                )
            })?,
        },
    };
    let condition = section.condition.clone().ok_or_else(|| {
        CliError::field(
            "contraction.condition",
            format!(
                "required by contraction.operator = \"{}\"",
                section.operator
            ),
        )
    })?;
    cfg.check_condition("contraction.condition", &condition)?;
    Ok(Some((kind, condition)))
}

/// Builds the golden-path guidance mode, naming absent parameters.
pub fn golden_guidance(section: &GoldenSection) -> CliResult<NoiseMode> {
    let strength = |field: &str| -> CliResult<f64> {
        section.guidance_strength.ok_or_else(|| {
            CliError::field(field, "required by golden.guidance = \"cfg\" or \"mix\"")
        })
    };
    Ok(match section.guidance {
        GoldenGuidance::Conditional => NoiseMode::Conditional,
        GoldenGuidance::Cfg => NoiseMode::Cfg {
            w: strength("golden.guidance_strength")?,
        },
        GoldenGuidance::Mix => NoiseMode::Mix {
            gamma: strength("golden.guidance_strength")?,
        },
    })
}
