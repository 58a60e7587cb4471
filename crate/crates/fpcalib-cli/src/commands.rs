//! The seven experiment commands.
//!
//! Each command validates its config section, runs the experiment through
//! the library, and writes provenance-stamped outputs.  Seed-level work is
//! parallelized with deterministically derived noise streams and merged in
//! sorted order, so results are byte-identical regardless of worker count.

use std::path::Path;

use fpcalib::analysis::{
    contraction_rate, contraction_rate_of, estimate_smoothness, golden_path_experiment,
    interval_contraction, optimal_beta_continuous, six_sigma_box, theorem_bound,
    uniform_partition_loss, BoundParams, ContractionEstimate, GoldenPathReport,
};
use fpcalib::guidance::RunOptions;
use fpcalib::guidance::{
    run_cfg_xk, run_cfgpp_xk, run_fsg, run_resampling, run_zsampling, FixedPointOperatorSpec,
    TrajectoryRecord,
};
use fpcalib::model::{sample_terminal, ConditionalGmm, Latent};
use fpcalib::rng::{derived_rng, standard_normal_vec};
use fpcalib::sampler::IntervalSolverConfig;
use fpcalib::schedule::NoiseSchedule;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{
    contraction_operator, golden_guidance, CliError, CliResult, Config, ContractionOperator,
    MethodKind, RunPlan, SweepAxis,
};
use crate::output::{fmt_f64, prepare, write_jsonl, write_report, CsvFile};

/// Noise-stream tag for terminal-latent draws (the library reserves 1-3).
const TAG_TERMINAL: u64 = 4;
/// Noise-stream tag for contraction-rate probes.
const TAG_CONTRACTION: u64 = 5;
/// Noise-stream tag for bound-pipeline rate estimates.
const TAG_BOUND_RATE: u64 = 6;
/// Noise-stream tag for bound-pipeline trajectory starts.
const TAG_BOUND_TRAJ: u64 = 7;
/// Noise-stream tag for smoothness estimation.
const TAG_SMOOTHNESS: u64 = 8;

/// Draws the standard-normal terminal latent of a run from its seed.
pub fn terminal_latent(dim: usize, s: &NoiseSchedule, seed: u64) -> Latent {
    let mut rng = derived_rng(seed, &[TAG_TERMINAL]);
    sample_terminal(dim, s.t_max(), &mut rng)
}

/// Runs one guided trajectory for a validated plan.
pub fn execute_run(
    plan: &RunPlan,
    model: &ConditionalGmm,
    s: &NoiseSchedule,
    seed: u64,
) -> CliResult<TrajectoryRecord> {
    let dim = model.components()[0].mean.len();
    let x_init = terminal_latent(dim, s, seed);
    let opts = RunOptions {
        sampler: plan.sampler,
        denoise_eval: plan.denoise_eval,
        record_latents: plan.record_latents,
        seed,
    };
    let record = match plan.method {
        MethodKind::Cfg => run_cfg_xk(
            model,
            s,
            &plan.condition,
            plan.strength,
            plan.k,
            &x_init,
            &opts,
        ),
        MethodKind::Cfgpp => run_cfgpp_xk(
            model,
            s,
            &plan.condition,
            plan.strength,
            plan.k,
            &x_init,
            &opts,
        ),
        MethodKind::Zsampling => run_zsampling(
            model,
            s,
            &plan.condition,
            plan.strength,
            plan.gamma,
            plan.reverse_strength,
            &plan.active_steps,
            &x_init,
            &opts,
        ),
        MethodKind::Resampling => run_resampling(
            model,
            s,
            &plan.condition,
            plan.strength,
            plan.gamma,
            &plan.active_steps,
            &x_init,
            &opts,
        ),
        MethodKind::Fsg => {
            let alloc = plan
                .allocation
                .as_ref()
                .expect("fsg plans carry an allocation");
            run_fsg(model, s, &plan.condition, alloc, &x_init, &opts)
        }
    }?;
    Ok(record)
}

/// Runs every seed of a plan in parallel and returns records sorted by seed.
fn execute_all(
    plan: &RunPlan,
    model: &ConditionalGmm,
    s: &NoiseSchedule,
) -> CliResult<Vec<TrajectoryRecord>> {
    let mut records = plan
        .seeds
        .par_iter()
        .map(|&seed| execute_run(plan, model, s, seed))
        .collect::<CliResult<Vec<_>>>()?;
    records.sort_by_key(|r| r.seed);
    Ok(records)
}

/// Mean of a gap series.
fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean gap over the late third of the run (`t <= max(T/3, 1)`), where
/// remaining noise is small and stale guidance errors are most visible.
fn late_third_mean(gaps: &[f64], t_start: usize) -> f64 {
    let cutoff = (t_start / 3).max(1);
    let late: Vec<f64> = gaps
        .iter()
        .enumerate()
        .filter(|(i, _)| t_start - i <= cutoff)
        .map(|(_, g)| *g)
        .collect();
    mean(&late)
}

/// Appends one run's gap series to the shared gaps CSV, checking the meter
/// against the per-step cost model.
fn gaps_rows(csv: &mut CsvFile, record: &TrajectoryRecord, costs: &[usize]) {
    assert_eq!(
        record.gaps.len(),
        costs.len(),
        "gap series must cover every step"
    );
    let mut cumulative = 0usize;
    for (i, (gap, cost)) in record.gaps.iter().zip(costs).enumerate() {
        cumulative += cost;
        let t = record.t_start - i;
        csv.row(&[
            record.seed.to_string(),
            t.to_string(),
            fmt_f64(*gap),
            cumulative.to_string(),
        ]);
    }
    assert_eq!(
        cumulative, record.nfe_total,
        "per-step cost model must reproduce the evaluation meter"
    );
}

/// `sample`: run guided trajectories and write them with their gap series.
pub fn cmd_sample(cfg: &Config, out: &Path, hash: &str) -> CliResult<()> {
    let s = cfg.build_schedule()?;
    let model = cfg.build_model()?;
    let plan = RunPlan::from_config(cfg, &s)?;
    let records = execute_all(&plan, &model, &s)?;
    let costs = plan.step_costs(s.t_max());

    let stamped: Vec<TrajectoryRecord> = records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.config_hash = hash.to_string();
            r
        })
        .collect();
    write_jsonl(&prepare(out, "trajectories.jsonl")?, hash, &stamped)?;

    let mut csv = CsvFile::new(hash, &["run_id", "t", "gap", "nfe_cum"]);
    for record in &records {
        gaps_rows(&mut csv, record, &costs);
    }
    csv.save(&prepare(out, "gaps.csv")?)?;

    println!(
        "sample: {} {} trajectories over {} steps, {} evaluations each; wrote {} and {}",
        records.len(),
        plan.method,
        s.t_max(),
        records[0].nfe_total,
        out.join("trajectories.jsonl").display(),
        out.join("gaps.csv").display(),
    );
    Ok(())
}

/// Per-seed gap summary in the `gap` report.
#[derive(Serialize)]
struct GapSummary {
    seed: u64,
    mean_gap: f64,
    late_third_mean_gap: f64,
    nfe_total: usize,
}

/// Aggregate gap summary in the `gap` report.
#[derive(Serialize)]
struct GapReport {
    method: String,
    t_max: usize,
    runs: Vec<GapSummary>,
    mean_gap: f64,
    late_third_mean_gap: f64,
}

/// `gap`: run trajectories and report per-step and summary gap statistics.
pub fn cmd_gap(cfg: &Config, out: &Path, hash: &str) -> CliResult<()> {
    let s = cfg.build_schedule()?;
    let model = cfg.build_model()?;
    let plan = RunPlan::from_config(cfg, &s)?;
    let records = execute_all(&plan, &model, &s)?;
    let costs = plan.step_costs(s.t_max());

    let mut csv = CsvFile::new(hash, &["run_id", "t", "gap", "nfe_cum"]);
    for record in &records {
        gaps_rows(&mut csv, record, &costs);
    }
    csv.save(&prepare(out, "gaps.csv")?)?;

    let runs: Vec<GapSummary> = records
        .iter()
        .map(|r| GapSummary {
            seed: r.seed,
            mean_gap: mean(&r.gaps),
            late_third_mean_gap: late_third_mean(&r.gaps, r.t_start),
            nfe_total: r.nfe_total,
        })
        .collect();
    let report = GapReport {
        method: plan.method.to_string(),
        t_max: s.t_max(),
        mean_gap: mean(&runs.iter().map(|r| r.mean_gap).collect::<Vec<_>>()),
        late_third_mean_gap: mean(
            &runs
                .iter()
                .map(|r| r.late_third_mean_gap)
                .collect::<Vec<_>>(),
        ),
        runs,
    };
    write_report(&prepare(out, "gap_report.json")?, hash, &report)?;

    println!(
        "gap: {} runs, mean gap {:.6e}, late-third mean {:.6e}; wrote {} and {}",
        report.runs.len(),
        report.mean_gap,
        report.late_third_mean_gap,
        out.join("gaps.csv").display(),
        out.join("gap_report.json").display(),
    );
    Ok(())
}

/// One contraction-rate row.
#[derive(Serialize)]
struct ContractionRow {
    t: usize,
    r_hat: f64,
    std_error: f64,
    n_pairs: usize,
}

/// Contraction report body.
#[derive(Serialize)]
struct ContractionReport {
    operator: String,
    rows: Vec<ContractionRow>,
}

/// Estimates the rate at one timestep with a stream derived from the base
/// seed and the timestep, so rows do not depend on list order.
fn contraction_at(
    cfg: &Config,
    model: &ConditionalGmm,
    s: &NoiseSchedule,
    t: usize,
    dt_override: Option<usize>,
) -> CliResult<ContractionEstimate> {
    let section = cfg.contraction_section()?;
    let mut rng = derived_rng(
        section.seed,
        &[TAG_CONTRACTION, dt_override.unwrap_or(0) as u64, t as u64],
    );
    let sample_condition = section.sample_condition.clone();
    let sampler = |r: &mut rand_chacha::ChaCha8Rng| {
        model.sample_x0(sample_condition.as_deref(), r).map(|l| l.x)
    };
    let estimate = match contraction_operator(cfg, section)? {
        None => contraction_rate_of(
            |x, _| Ok(x.clone()),
            sampler,
            s,
            t,
            section.n_pairs,
            section.perturbation_scale,
            &mut rng,
        )?,
        Some((mut kind, condition)) => {
            if let fpcalib::guidance::OperatorKind::Foresight { dt, .. } = &mut kind {
                if let Some(v) = dt_override {
                    *dt = v;
                }
            }
            let inner = match kind {
                // Look-ahead legs are transported in unit steps.
                fpcalib::guidance::OperatorKind::Foresight { dt, .. } => dt,
                _ => 1,
            };
            let spec = FixedPointOperatorSpec {
                kind,
                condition,
                solver: IntervalSolverConfig { inner_steps: inner },
            };
            contraction_rate(
                &spec,
                model,
                s,
                sampler,
                t,
                section.n_pairs,
                section.perturbation_scale,
                &mut rng,
            )?
        }
    };
    Ok(estimate)
}

/// Validates the contraction section's structural fields.
fn validate_contraction(cfg: &Config, s: &NoiseSchedule) -> CliResult<()> {
    let section = cfg.contraction_section()?;
    if section.timesteps.is_empty() {
        return Err(CliError::field(
            "contraction.timesteps",
            "at least one timestep is required",
        ));
    }
    for &t in &section.timesteps {
        if t == 0 || t > s.t_max() {
            return Err(CliError::field(
                "contraction.timesteps",
                format!("t = {t} is outside 1..={}", s.t_max()),
            ));
        }
        let above = matches!(
            section.operator,
            ContractionOperator::Zsampling | ContractionOperator::Resampling
        );
        if above && t >= s.t_max() {
            return Err(CliError::field(
                "contraction.timesteps",
                format!(
                    "operator \"{}\" reflects through t + 1, so t = {t} must stay below {}",
                    section.operator,
                    s.t_max()
                ),
            ));
        }
        if section.operator == ContractionOperator::Foresight {
            let dt = section.dt.unwrap_or(0);
            if dt > t {
                return Err(CliError::field(
                    "contraction.dt",
                    format!("look-ahead {dt} exceeds the probed timestep {t}"),
                ));
            }
        }
    }
    if section.n_pairs == 0 {
        return Err(CliError::field("contraction.n_pairs", "must be at least 1"));
    }
    if !(section.perturbation_scale.is_finite() && section.perturbation_scale > 0.0) {
        return Err(CliError::field(
            "contraction.perturbation_scale",
            "must be positive and finite",
        ));
    }
    if let Some(c) = &section.sample_condition {
        cfg.check_condition("contraction.sample_condition", c)?;
    }
    Ok(())
}

/// `contraction`: estimate operator contraction rates at chosen timesteps.
pub fn cmd_contraction(cfg: &Config, out: &Path, hash: &str) -> CliResult<()> {
    let s = cfg.build_schedule()?;
    let model = cfg.build_model()?;
    validate_contraction(cfg, &s)?;
    let section = cfg.contraction_section()?;

    let mut rows = section
        .timesteps
        .par_iter()
        .map(|&t| {
            let e = contraction_at(cfg, &model, &s, t, None)?;
            Ok(ContractionRow {
                t,
                r_hat: e.r_hat,
                std_error: e.std_error,
                n_pairs: e.n_pairs,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    rows.sort_by_key(|r| r.t);

    let mut csv = CsvFile::new(hash, &["t", "r_hat", "std_error", "n_pairs"]);
    for r in &rows {
        csv.row(&[
            r.t.to_string(),
            fmt_f64(r.r_hat),
            fmt_f64(r.std_error),
            r.n_pairs.to_string(),
        ]);
    }
    csv.save(&prepare(out, "contraction.csv")?)?;
    let report = ContractionReport {
        operator: section.operator.to_string(),
        rows,
    };
    write_report(&prepare(out, "contraction_report.json")?, hash, &report)?;

    println!(
        "contraction: operator {} at {} timesteps; wrote {} and {}",
        report.operator,
        report.rows.len(),
        out.join("contraction.csv").display(),
        out.join("contraction_report.json").display(),
    );
    Ok(())
}

/// One feasible partition in the bound report.
#[derive(Serialize)]
struct BoundRow {
    beta: f64,
    m: usize,
    w: usize,
    k: usize,
    r_hat: f64,
    r_used: f64,
    c1: f64,
    g_value: f64,
    step_bound: f64,
    measured_loss: f64,
    minimizer: bool,
}

/// Bound report body.
#[derive(Serialize)]
struct BoundReport {
    n: usize,
    t_max: usize,
    l_hat: f64,
    b_hat: f64,
    c_big: f64,
    c_small: f64,
    slack: f64,
    rows: Vec<BoundRow>,
    optimal_m: usize,
    optimal_beta: f64,
    beta_continuous: f64,
    bound_holds_everywhere: bool,
}

/// `bound`: validate the loss bound over every feasible uniform partition.
///
/// For each interval count `M` dividing both the budget and the timestep
/// count, the command estimates the interval contraction rate, runs the
/// partition procedure, and compares the measured per-step loss with the
/// per-step bound `B_hat^2 g(beta)`.
pub fn cmd_bound(cfg: &Config, out: &Path, hash: &str) -> CliResult<()> {
    let s = cfg.build_schedule()?;
    let model = cfg.build_model()?;
    let section = cfg.bound_section()?;
    cfg.check_condition("bound.condition", &section.condition)?;
    if section.n == 0 {
        return Err(CliError::field("bound.n", "the budget must be at least 1"));
    }
    if section.n_trajectories == 0 {
        return Err(CliError::field(
            "bound.n_trajectories",
            "must be at least 1",
        ));
    }
    if section.n_pairs == 0 {
        return Err(CliError::field("bound.n_pairs", "must be at least 1"));
    }
    if !(section.slack.is_finite() && section.slack >= 0.0) {
        return Err(CliError::field(
            "bound.slack",
            "must be finite and nonnegative",
        ));
    }
    if let Some(l) = section.l {
        if !(l.is_finite() && l >= 0.0) {
            return Err(CliError::field("bound.l", "must be finite and nonnegative"));
        }
    } else if section.smoothness_pairs == 0 {
        return Err(CliError::field(
            "bound.smoothness_pairs",
            "must be at least 1",
        ));
    }

    let t_max = s.t_max();
    let dim = model.components()[0].mean.len();

    // Smoothness constant: supplied, or the larger of the unconditional and
    // conditional estimates over the six-sigma box.
    let l_hat = match section.l {
        Some(l) => l,
        None => {
            let region = six_sigma_box(&model);
            let mut rng = derived_rng(section.seed, &[TAG_SMOOTHNESS, 0]);
            let uncond =
                estimate_smoothness(&model, &s, None, region, section.smoothness_pairs, &mut rng)?;
            let mut rng = derived_rng(section.seed, &[TAG_SMOOTHNESS, 1]);
            let cond = estimate_smoothness(
                &model,
                &s,
                Some(&section.condition),
                region,
                section.smoothness_pairs,
                &mut rng,
            )?;
            uncond.max(cond)
        }
    };

    // Feasible partitions, measured rates, and partition-procedure losses.
    let feasible: Vec<usize> = (1..=section.n.min(t_max))
        .filter(|m| section.n % m == 0 && t_max % m == 0)
        .collect();
    struct Measured {
        m: usize,
        r_hat: f64,
        losses: Vec<f64>,
        max_norm: f64,
    }
    let measured = feasible
        .par_iter()
        .map(|&m| {
            let w = t_max / m;
            let k = section.n / m;
            let mut rng = derived_rng(section.seed, &[TAG_BOUND_RATE, m as u64]);
            let r_hat = interval_contraction(
                &model,
                &s,
                &section.condition,
                w,
                section.gamma,
                section.n_pairs,
                section.perturbation_scale,
                &mut rng,
            )?;
            let mut rng = derived_rng(section.seed, &[TAG_BOUND_TRAJ, m as u64]);
            let mut losses = Vec::with_capacity(section.n_trajectories);
            let mut max_norm = 0.0f64;
            for _ in 0..section.n_trajectories {
                let z = standard_normal_vec(&mut rng, dim);
                let x_init = Latent::new(z, t_max);
                let run = uniform_partition_loss(
                    &model,
                    &s,
                    &section.condition,
                    &x_init,
                    w,
                    k,
                    section.gamma,
                )?;
                losses.push(run.mean_sq_gap);
                max_norm = max_norm.max(run.max_norm);
            }
            Ok(Measured {
                m,
                r_hat,
                losses,
                max_norm,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    // The empirical norm bound covers every partition's trajectories.
    let b_hat = measured.iter().map(|m| m.max_norm).fold(1.0f64, f64::max);

    let mut rows = Vec::with_capacity(measured.len());
    for m in &measured {
        let r_used = (m.r_hat + section.slack).min(1.0 - 1e-9);
        let params = BoundParams::from_schedule(
            section.n,
            &s,
            b_hat,
            l_hat,
            r_used,
            section.c_big,
            section.c_small,
        )?;
        let value = theorem_bound(&params, 1.0 / m.m as f64)?;
        rows.push(BoundRow {
            beta: 1.0 / m.m as f64,
            m: m.m,
            w: t_max / m.m,
            k: section.n / m.m,
            r_hat: m.r_hat,
            r_used,
            c1: value.c1,
            g_value: value.g,
            step_bound: b_hat * b_hat * value.g,
            measured_loss: mean(&m.losses),
            minimizer: false,
        });
    }
    rows.sort_by_key(|r| r.m);
    let best = rows
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.g_value.partial_cmp(&b.g_value).expect("finite bounds"))
        .map(|(i, _)| i)
        .ok_or_else(|| {
            CliError::field(
                "bound.n",
                format!(
                    "no interval count divides both the budget {} and the timestep count {t_max}",
                    section.n
                ),
            )
        })?;
    rows[best].minimizer = true;

    let mut csv = CsvFile::new(
        hash,
        &[
            "beta",
            "m",
            "w",
            "k",
            "g_value",
            "measured_loss",
            "minimizer",
        ],
    );
    for r in &rows {
        csv.row(&[
            fmt_f64(r.beta),
            r.m.to_string(),
            r.w.to_string(),
            r.k.to_string(),
            fmt_f64(r.g_value),
            fmt_f64(r.measured_loss),
            (r.minimizer as u8).to_string(),
        ]);
    }
    csv.save(&prepare(out, "bound.csv")?)?;

    let report = BoundReport {
        n: section.n,
        t_max,
        l_hat,
        b_hat,
        c_big: section.c_big,
        c_small: section.c_small,
        slack: section.slack,
        optimal_m: rows[best].m,
        optimal_beta: rows[best].beta,
        beta_continuous: optimal_beta_continuous(
            section.n,
            rows[best].c1,
            l_hat,
            rows[best].r_used,
        ),
        bound_holds_everywhere: rows.iter().all(|r| r.measured_loss <= r.step_bound),
        rows,
    };
    write_report(&prepare(out, "bound_report.json")?, hash, &report)?;

    println!(
        "bound: {} feasible partitions of N = {} over T = {}, minimizer M = {} (beta = {:.4}), bound holds everywhere: {}; wrote {} and {}",
        report.rows.len(),
        report.n,
        report.t_max,
        report.optimal_m,
        report.optimal_beta,
        report.bound_holds_everywhere,
        out.join("bound.csv").display(),
        out.join("bound_report.json").display(),
    );
    Ok(())
}

/// `golden`: test whether guided inversion identifies its own condition.
pub fn cmd_golden(cfg: &Config, out: &Path, hash: &str) -> CliResult<()> {
    let s = cfg.build_schedule()?;
    let model = cfg.build_model()?;
    let section = cfg.golden_section()?;
    cfg.check_condition("golden.condition_match", &section.condition_match)?;
    cfg.check_condition("golden.condition_mismatch", &section.condition_mismatch)?;
    if section.t_star == 0 || section.t_star > s.t_max() {
        return Err(CliError::field(
            "golden.t_star",
            format!("must lie in 1..={}", s.t_max()),
        ));
    }
    if section.n_trials == 0 {
        return Err(CliError::field("golden.n_trials", "must be at least 1"));
    }
    let guidance = golden_guidance(section)?;
    let report: GoldenPathReport = golden_path_experiment(
        &model,
        &s,
        (&section.condition_match, &section.condition_mismatch),
        section.t_star,
        &guidance,
        section.n_trials,
        section.seed,
    )
    .map_err(|e| match e {
        fpcalib::Error::InvalidInput(m) => CliError::field("golden", m),
        other => other.into(),
    })?;
    write_report(&prepare(out, "golden_report.json")?, hash, &report)?;

    println!(
        "golden: {}/{} wins for the matching condition (sign-test p = {:.3e}); wrote {}",
        report.wins,
        report.n_trials,
        report.sign_test_p,
        out.join("golden_report.json").display(),
    );
    Ok(())
}

/// `sweep`: repeat an experiment along one parameter axis.
pub fn cmd_sweep(cfg: &Config, out: &Path, hash: &str) -> CliResult<()> {
    let s = cfg.build_schedule()?;
    let model = cfg.build_model()?;
    let section = cfg.sweep_section()?;
    if section.values.is_empty() {
        return Err(CliError::field(
            "sweep.values",
            "at least one value is required",
        ));
    }
    if !section.values.iter().all(|v| v.is_finite()) {
        return Err(CliError::field("sweep.values", "values must be finite"));
    }

    match section.axis {
        SweepAxis::W | SweepAxis::Lambda | SweepAxis::Gamma => {
            sweep_runs(cfg, &model, &s, out, hash)
        }
        SweepAxis::Dt => sweep_foresight(cfg, &model, &s, out, hash),
    }
}

/// Sweeps a `[run]` strength axis; one row per (value, seed).
fn sweep_runs(
    cfg: &Config,
    model: &ConditionalGmm,
    s: &NoiseSchedule,
    out: &Path,
    hash: &str,
) -> CliResult<()> {
    let section = cfg.sweep_section()?;
    let run = cfg.run_section()?;
    let applicable = match section.axis {
        SweepAxis::W => matches!(
            run.method,
            MethodKind::Cfg | MethodKind::Zsampling | MethodKind::Resampling
        ),
        SweepAxis::Lambda => matches!(run.method, MethodKind::Cfgpp | MethodKind::Fsg),
        SweepAxis::Gamma => matches!(
            run.method,
            MethodKind::Zsampling | MethodKind::Resampling | MethodKind::Fsg
        ),
        SweepAxis::Dt => unreachable!("dt sweeps are handled by sweep_foresight"),
    };
    if !applicable {
        return Err(CliError::field(
            "sweep.axis",
            format!(
                "axis \"{}\" is not a parameter of run.method = \"{}\"",
                section.axis, run.method
            ),
        ));
    }

    // One validated plan per value; planner-based allocations are rebuilt so
    // the swept strength reaches the look-ahead schedule too.
    let mut plans = Vec::with_capacity(section.values.len());
    for &value in &section.values {
        let mut varied = cfg.clone();
        let run = varied.run.as_mut().expect("run section checked above");
        match section.axis {
            SweepAxis::W => run.w = Some(value),
            SweepAxis::Lambda => run.lambda = Some(value),
            SweepAxis::Gamma => run.gamma = Some(value),
            SweepAxis::Dt => unreachable!(),
        }
        let plan = RunPlan::from_config(&varied, s).map_err(|e| match e {
            CliError::Config(m) => {
                CliError::field("sweep.values", format!("value {value} is invalid: {m}"))
            }
            other => other,
        })?;
        plans.push((value, plan));
    }

    let jobs: Vec<(usize, u64)> = plans
        .iter()
        .enumerate()
        .flat_map(|(i, (_, plan))| plan.seeds.iter().map(move |&seed| (i, seed)))
        .collect();
    let mut results = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let record = execute_run(&plans[i].1, model, s, seed)?;
            Ok((i, seed, record))
        })
        .collect::<CliResult<Vec<_>>>()?;
    results.sort_by_key(|(i, seed, _)| (*i, *seed));

    let mut csv = CsvFile::new(
        hash,
        &[
            "axis",
            "value",
            "seed",
            "mean_gap",
            "late_third_mean_gap",
            "nfe_total",
        ],
    );
    for (i, seed, record) in &results {
        csv.row(&[
            section.axis.to_string(),
            fmt_f64(plans[*i].0),
            seed.to_string(),
            fmt_f64(mean(&record.gaps)),
            fmt_f64(late_third_mean(&record.gaps, record.t_start)),
            record.nfe_total.to_string(),
        ]);
    }
    csv.save(&prepare(out, "sweep.csv")?)?;

    println!(
        "sweep: axis {} over {} values x {} seeds; wrote {}",
        section.axis,
        plans.len(),
        cfg.run_section()?.seeds.len(),
        out.join("sweep.csv").display(),
    );
    Ok(())
}

/// Sweeps the look-ahead span of the foresight operator; one row per
/// (value, timestep).
fn sweep_foresight(
    cfg: &Config,
    model: &ConditionalGmm,
    s: &NoiseSchedule,
    out: &Path,
    hash: &str,
) -> CliResult<()> {
    let section = cfg.sweep_section()?;
    let contraction = cfg.contraction_section()?;
    if contraction.operator != ContractionOperator::Foresight {
        return Err(CliError::field(
            "sweep.axis",
            format!(
                "axis \"dt\" needs contraction.operator = \"foresight\", got \"{}\"",
                contraction.operator
            ),
        ));
    }
    let mut spans = Vec::with_capacity(section.values.len());
    for &value in &section.values {
        if value.fract() != 0.0 || value < 1.0 {
            return Err(CliError::field(
                "sweep.values",
                format!("look-ahead spans must be positive integers, got {value}"),
            ));
        }
        spans.push(value as usize);
    }
    validate_contraction(cfg, s)?;
    for &dt in &spans {
        for &t in &contraction.timesteps {
            if dt > t {
                return Err(CliError::field(
                    "sweep.values",
                    format!("look-ahead {dt} exceeds the probed timestep {t}"),
                ));
            }
        }
    }

    let jobs: Vec<(usize, usize)> = spans
        .iter()
        .enumerate()
        .flat_map(|(i, _)| contraction.timesteps.iter().map(move |&t| (i, t)))
        .collect();
    let mut results = jobs
        .par_iter()
        .map(|&(i, t)| {
            let e = contraction_at(cfg, model, s, t, Some(spans[i]))?;
            Ok((i, t, e))
        })
        .collect::<CliResult<Vec<_>>>()?;
    results.sort_by_key(|(i, t, _)| (*i, *t));

    let mut csv = CsvFile::new(
        hash,
        &["axis", "value", "t", "r_hat", "std_error", "n_pairs"],
    );
    for (i, t, e) in &results {
        csv.row(&[
            "dt".to_string(),
            spans[*i].to_string(),
            t.to_string(),
            fmt_f64(e.r_hat),
            fmt_f64(e.std_error),
            e.n_pairs.to_string(),
        ]);
    }
    csv.save(&prepare(out, "sweep.csv")?)?;

    println!(
        "sweep: axis dt over {} spans x {} timesteps; wrote {}",
        spans.len(),
        contraction.timesteps.len(),
        out.join("sweep.csv").display(),
    );
    Ok(())
}

/// `schedule-dump`: write the schedule's derived coefficient table.
pub fn cmd_schedule_dump(cfg: &Config, out: &Path, hash: &str) -> CliResult<()> {
    let s = cfg.build_schedule()?;
    let coeffs = s.ode_coefficients();
    let mut csv = CsvFile::new(
        hash,
        &["t", "alpha", "alpha_bar", "xi", "xi_tilde", "lambda", "mu"],
    );
    for t in 1..=s.t_max() {
        csv.row(&[
            t.to_string(),
            fmt_f64(s.alpha(t)),
            fmt_f64(s.alpha_bar(t)),
            fmt_f64(s.xi(t)),
            fmt_f64(s.xi_tilde(t)),
            fmt_f64(coeffs.lambda(t)),
            fmt_f64(coeffs.mu(t)),
        ]);
    }
    csv.save(&prepare(out, "schedule.csv")?)?;

    println!(
        "schedule-dump: {} timesteps; wrote {}",
        s.t_max(),
        out.join("schedule.csv").display(),
    );
    Ok(())
}
