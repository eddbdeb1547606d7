use std::sync::Arc;

use follmer_core::analysis::{
    energy_test, invariance_check, kl_path, optimal_g, variance_identity_check, AnalysisError, ErrorProfile,
    ScoreErrorModel, MIN_TEST_SAMPLES,
};
use follmer_core::drift::{
    empirical_lipschitz, fit_follmer_regression, fit_regression, lipschitz_bound, BaselineDrift,
    DiffusionCoefficient, DriftError, RegularPart, TunedDrift,
};
use follmer_core::schedule::{follmer_schedule_data, noise_level_map, validate_schedule};
use follmer_core::sde::{derive_task_seed, simulate, simulate_singular, Scheme, SdeError};
use follmer_core::{PathEnsemble, Schedule, StreamRng};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::Objective;
use crate::output::{csv_table, RunOutput};
use crate::setup::{self, setup, Setup};
use crate::{CliError, Context};

// Task identifiers for seeds derived from the run seed.
const TASK_SIMULATE: u64 = 30;
const TASK_ENERGY_TARGET: u64 = 20;
const TASK_ENERGY_TEST: u64 = 21;
const TASK_FIT: u64 = 31;
const TASK_INVARIANCE: u64 = 32;
const TASK_PROBES: u64 = 33;

fn sde_error(e: SdeError) -> CliError {
    match e {
        SdeError::Config(_) | SdeError::Exponent(_) => CliError::Config(e.to_string()),
        other => CliError::Simulation(other.to_string()),
    }
}

fn drift_fit_error(e: DriftError) -> CliError {
    match e {
        DriftError::Precondition(_) | DriftError::TerminalSingularity | DriftError::DimensionMismatch { .. } => {
            CliError::Config(e.to_string())
        }
        other => CliError::Fitting(other.to_string()),
    }
}

fn analysis_error(e: AnalysisError) -> CliError {
    match e {
        AnalysisError::Domain(_) => CliError::Config(e.to_string()),
        other => CliError::Check(other.to_string()),
    }
}

#[derive(Serialize)]
struct MarginalRow {
    t: f64,
    coordinate: usize,
    mean: f64,
    target_mean: f64,
    mean_tolerance: f64,
    variance: f64,
    target_variance: f64,
    variance_tolerance: f64,
    pass: bool,
}

#[derive(Serialize)]
struct SampleSummary {
    paths: usize,
    steps: usize,
    scheme: Scheme,
    singular_exponent: f64,
    drift: String,
    g: String,
    marginals: Vec<MarginalRow>,
    energy: Option<follmer_core::analysis::EnergyTest>,
    energy_note: Option<String>,
    marginal_check: bool,
}

/// Compares per-coordinate mean and variance at time index `k` with the
/// interpolant marginal `β x★ + √t σ z`. Tolerances are four standard errors
/// of the sample estimates.
fn marginal_rows(ens: &PathEnsemble, k: usize, su: &Setup) -> Vec<MarginalRow> {
    let t = ens.times[k];
    let (b, sg) = (su.schedule.beta(t), su.schedule.sigma(t));
    let mu = su.target.mean();
    let cov = su.target.covariance();
    let n = ens.path_count as f64;
    (0..ens.dim)
        .map(|j| {
            let xs: Vec<f64> = (0..ens.path_count).map(|p| ens.value(p, k, j)).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let dev2: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
            let variance = dev2.iter().sum::<f64>() / (n - 1.0);
            let m4 = dev2.iter().map(|d| d * d).sum::<f64>() / n;
            let target_mean = b * mu[j];
            let target_variance = b * b * cov[(j, j)] + t * sg * sg;
            let mean_tolerance = 4.0 * (target_variance / n).sqrt() + 1e-12;
            let variance_tolerance = 4.0 * ((m4 - variance * variance).max(0.0) / n).sqrt() + 1e-12;
            MarginalRow {
                t,
                coordinate: j,
                mean,
                target_mean,
                mean_tolerance,
                variance,
                target_variance,
                variance_tolerance,
                pass: (mean - target_mean).abs() <= mean_tolerance
                    && (variance - target_variance).abs() <= variance_tolerance,
            }
        })
        .collect()
}

pub fn sample(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let su = setup(ctx)?;
    let (drift, p) = setup::drift(ctx, &su)?;
    let paths = cfg.integrator.paths;
    let seed = derive_task_seed(cfg.seed, TASK_SIMULATE, 0);
    let (ens, scheme) = if p > 0.0 {
        let icfg = cfg.integrator.to_config(Scheme::SingularIntegratingFactor, seed);
        let origin = vec![0.0; su.target.dim()];
        let regular = RegularPart::new(drift, p, origin.clone()).map_err(CliError::config)?;
        let ens = simulate_singular(p, &origin, &regular, &su.g, &icfg, paths).map_err(sde_error)?;
        (ens, icfg.scheme)
    } else {
        let icfg = cfg.integrator.to_config(Scheme::EulerMaruyama, seed);
        (simulate(&*drift, &su.g, &icfg, paths).map_err(sde_error)?, icfg.scheme)
    };

    let mut checked: Vec<usize> = [0.25, 0.5, 0.75]
        .iter()
        .filter(|&&t| t > ens.times[0] && t < *ens.times.last().unwrap())
        .map(|&t| ens.time_index(t))
        .collect();
    checked.push(ens.times.len() - 1);
    checked.dedup();
    let marginals: Vec<MarginalRow> = checked.iter().flat_map(|&k| marginal_rows(&ens, k, &su)).collect();
    let marginal_check = marginals.iter().all(|r| r.pass);

    let t_last = *ens.times.last().unwrap();
    let take = paths.min(cfg.analysis.energy_samples);
    let (energy, energy_note) = if (t_last - 1.0).abs() > 1e-12 {
        (None, Some(format!("energy test needs t_end = 1, run ends at {t_last}")))
    } else if take < MIN_TEST_SAMPLES {
        (None, Some(format!("energy test needs {MIN_TEST_SAMPLES} samples, have {take}")))
    } else {
        let terminal = ens.terminal();
        let x = terminal.rows(0, take).into_owned();
        let y = su.target.sample(take, derive_task_seed(cfg.seed, TASK_ENERGY_TARGET, 0));
        let test = energy_test(
            &x,
            &y,
            cfg.analysis.permutations,
            cfg.analysis.bootstrap,
            derive_task_seed(cfg.seed, TASK_ENERGY_TEST, 0),
        )
        .map_err(analysis_error)?;
        (Some(test), None)
    };

    let mut out = RunOutput::create(&ctx.out)?;
    let mut bin = Vec::new();
    ens.write_binary(&mut bin)?;
    out.write("ensemble.bin", &bin)?;
    if cfg.integrator.csv {
        let mut text = Vec::new();
        ens.write_csv(&mut text)?;
        out.write("ensemble.csv", &text)?;
    }
    let summary = SampleSummary {
        paths,
        steps: cfg.integrator.step_count,
        scheme,
        singular_exponent: p,
        drift: ens.drift_descriptor.clone(),
        g: ens.g_descriptor.clone(),
        marginals,
        energy,
        energy_note,
        marginal_check,
    };
    out.write_json("summary.json", &summary)?;
    out.finish("sample", cfg)?;

    println!("paths: {paths}");
    if let Some(e) = &summary.energy {
        println!("energy_statistic: {}", e.statistic);
        println!("energy_p_value: {}", e.p_value);
    }
    println!("marginal_check: {}", if marginal_check { "pass" } else { "fail" });
    Ok(())
}

pub fn fit(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let su = setup(ctx)?;
    let spec = &cfg.fit.estimator;
    let n = cfg.fit.samples;
    if n == 0 {
        return Err(CliError::Config("fit.samples must be positive".into()));
    }
    let seed = derive_task_seed(cfg.seed, TASK_FIT, 0);
    let est = match cfg.fit.objective {
        Objective::Interpolant => fit_regression(&su.schedule, su.target.clone(), spec, n, seed),
        Objective::Follmer => {
            let fsd = follmer_schedule_data(su.schedule.a_ref_fn(), su.g.function()).map_err(CliError::config)?;
            fit_follmer_regression(Arc::new(fsd), &su.g, su.target.clone(), spec, n, seed)
        }
    }
    .map_err(drift_fit_error)?;

    let width = est.coefficients.first().map_or(0, Vec::len);
    let mut header: Vec<String> = ["t", "loss", "floor"].iter().map(|s| s.to_string()).collect();
    header.extend((0..width).map(|i| format!("c{i}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<f64>> = est
        .knots
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut row = vec![t, est.metadata.knot_loss[k], est.metadata.knot_floor[k]];
            row.extend_from_slice(&est.coefficients[k]);
            row
        })
        .collect();

    let mut out = RunOutput::create(&ctx.out)?;
    let json = est.to_json().map_err(|e| CliError::Fitting(e.to_string()))?;
    out.write("estimator.json", json.as_bytes())?;
    out.write("loss.csv", csv_table(&header_refs, &rows).as_bytes())?;
    out.finish("fit", cfg)?;

    println!("final_loss: {}", est.metadata.final_loss);
    println!("variance_floor: {}", est.metadata.variance_floor);
    if est.metadata.rank_deficient {
        println!("rank_deficient_knots: {:?}", est.metadata.rank_deficient_knots);
    }
    Ok(())
}

#[derive(Serialize)]
struct TuneSummary {
    schedule: String,
    error_level: f64,
    delta: f64,
    kl_sigma: f64,
    kl_follmer: f64,
    follmer_not_worse: bool,
}

pub fn tune(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let s = cfg.schedule.build().map_err(CliError::config)?;
    let m = cfg.analysis.table_points;
    let rows: Vec<Vec<f64>> = (1..=m)
        .map(|k| {
            let t = k as f64 / (m + 1) as f64;
            let o = optimal_g(&s, t).map_err(analysis_error)?;
            Ok(vec![t, s.sigma(t), s.g_follmer(t), s.a_ref(t), o.alpha, o.gamma, o.psi_min])
        })
        .collect::<Result<_, CliError>>()?;

    let level = ErrorProfile::Constant(cfg.analysis.error_level);
    let delta = cfg.analysis.delta;
    let kl_s = kl_path(&s, &DiffusionCoefficient::baseline(&s), &level, delta).map_err(analysis_error)?;
    let kl_f = kl_path(&s, &DiffusionCoefficient::follmer(&s), &level, delta).map_err(analysis_error)?;
    // The pointwise minimiser cannot lose; allow for quadrature error only.
    let slack = kl_s.error_estimate + kl_f.error_estimate + 1e-9 * kl_s.total.abs();
    let summary = TuneSummary {
        schedule: s.name.clone(),
        error_level: cfg.analysis.error_level,
        delta,
        kl_sigma: kl_s.total,
        kl_follmer: kl_f.total,
        follmer_not_worse: kl_f.total <= kl_s.total + slack,
    };

    let mut out = RunOutput::create(&ctx.out)?;
    let header = ["t", "sigma", "g_follmer", "a_ref", "alpha", "gamma", "psi_min"];
    out.write("tune.csv", csv_table(&header, &rows).as_bytes())?;
    out.write_json("kl_sigma.json", &kl_s)?;
    out.write_json("kl_follmer.json", &kl_f)?;
    out.write_json("tune.json", &summary)?;
    out.finish("tune", cfg)?;

    println!("kl_sigma: {}", kl_s.total);
    println!("kl_follmer: {}", kl_f.total);
    if !summary.follmer_not_worse {
        return Err(CliError::Check(format!(
            "KL with g^F ({}) exceeds KL with sigma ({})",
            kl_f.total, kl_s.total
        )));
    }
    Ok(())
}

pub fn invariance(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let a = &cfg.analysis;
    if a.schedules.len() < 2 {
        return Err(CliError::Config("analysis.schedules must list at least two schedules".into()));
    }
    let schedules: Vec<Schedule> = a
        .schedules
        .iter()
        .map(|s| s.build().map_err(CliError::config))
        .collect::<Result<_, _>>()?;
    let target = cfg.target.build().map_err(CliError::config)?;
    let err = ScoreErrorModel::Synthetic(cfg.score_error());
    let seed = derive_task_seed(cfg.seed, TASK_INVARIANCE, 0);
    let report = invariance_check(&schedules, &*target, &err, a.r_max, a.mc_samples, seed).map_err(analysis_error)?;

    let mut out = RunOutput::create(&ctx.out)?;
    out.write_json("invariance.json", &report)?;
    out.finish("invariance", cfg)?;

    println!("kl_star: {}", report.kl_star);
    for row in &report.schedules {
        println!("{}: {} (gap {:.3e})", row.schedule, row.total, row.gap_vs_kl_star);
    }
    println!("max_gap: {}", report.max_gap);
    if report.max_gap > a.tolerance {
        return Err(CliError::Check(format!(
            "relative gap {} exceeds tolerance {}",
            report.max_gap, a.tolerance
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Serialize)]
struct Check {
    name: String,
    status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tolerance: Option<f64>,
    #[serde(skip_serializing_if = "String::is_empty")]
    note: String,
}

impl Check {
    fn new(name: impl Into<String>, status: Status) -> Self {
        Self {
            name: name.into(),
            status,
            t: None,
            value: None,
            tolerance: None,
            note: String::new(),
        }
    }

    fn measured(name: impl Into<String>, t: f64, value: f64, tolerance: f64) -> Self {
        let status = if value <= tolerance { Status::Pass } else { Status::Fail };
        Self {
            t: Some(t),
            value: Some(value),
            tolerance: Some(tolerance),
            ..Self::new(name, status)
        }
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

const DIAGNOSTIC_TIMES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

fn probes(su: &Setup, t: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = su.target.dim();
    let (b, noise) = (su.schedule.beta(t), t.sqrt() * su.schedule.sigma(t));
    let mut rng = StreamRng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut x = vec![0.0; d];
            su.target.draw(&mut rng, &mut x);
            for v in &mut x {
                *v = b * *v + noise * rng.sample::<f64, _>(StandardNormal);
            }
            x
        })
        .collect()
}

fn diagnostics(ctx: &Context, su: &Setup) -> Vec<Check> {
    let s = &su.schedule;
    let mut checks = Vec::new();

    match noise_level_map(s) {
        Ok(_) => checks.push(Check::new("noise_level_monotone", Status::Pass)),
        Err(e) => checks.push(Check::new("noise_level_monotone", Status::Fail).note(e.to_string())),
    }

    match validate_schedule(s) {
        Ok(report) => {
            if report.violations.is_empty() {
                checks.push(Check::new("schedule_conditions", Status::Pass));
            }
            for v in report.violations {
                let mut c = Check::new(format!("schedule_conditions: {}", v.condition), Status::Fail);
                c.t = Some(v.t);
                c.value = Some(v.value);
                checks.push(c);
            }
            for note in report.skipped {
                checks.push(Check::new("schedule_conditions", Status::Skipped).note(note));
            }
        }
        Err(e) => checks.push(Check::new("schedule_conditions", Status::Fail).note(e.to_string())),
    }

    for &t in &DIAGNOSTIC_TIMES {
        match variance_identity_check(s, t) {
            Ok((lhs, rhs)) => {
                let tol = 1e-8 * rhs.abs().max(1.0);
                checks.push(Check::measured("variance_identity", t, (lhs - rhs).abs(), tol));
            }
            Err(e) => {
                let mut c = Check::new("variance_identity", Status::Fail).note(e.to_string());
                c.t = Some(t);
                checks.push(c);
            }
        }
    }

    match su.target.as_mixture() {
        None => checks.push(Check::new("lipschitz_bound", Status::Skipped).note("target is not a Gaussian mixture")),
        Some(m) if m.smoothing_eta() <= 0.0 => checks.push(
            Check::new("lipschitz_bound", Status::Skipped).note("the smoothed bound needs eta > 0"),
        ),
        Some(m) => {
            let drift = BaselineDrift::new(s.clone(), su.target.clone());
            for (i, &t) in [0.1, 0.5, 0.9].iter().enumerate() {
                let pts = probes(su, t, 200, derive_task_seed(ctx.config.seed, TASK_PROBES, i as u64));
                let check = lipschitz_bound(s, m, t).and_then(|bound| {
                    let emp = empirical_lipschitz(&drift, t, &pts, 1e-5)?;
                    Ok(Check::measured("lipschitz_bound", t, emp, bound)
                        .note(format!("empirical {emp:.6e} against bound {bound:.6e}")))
                });
                checks.push(check.unwrap_or_else(|e| {
                    let mut c = Check::new("lipschitz_bound", Status::Fail).note(e.to_string());
                    c.t = Some(t);
                    c
                }));
            }
        }
    }

    // Tweedie: ∇log q_r(y) = (E[x★ | x★ + r z = y] − y) / r².
    let d = su.target.dim();
    for (i, &r) in [0.1, 0.5, 1.0, 2.0].iter().enumerate() {
        let mut rng = StreamRng::seed_from_u64(derive_task_seed(ctx.config.seed, TASK_PROBES, 100 + i as u64));
        let ys: Vec<Vec<f64>> = (0..16)
            .map(|_| {
                let mut x = vec![0.0; d];
                su.target.draw(&mut rng, &mut x);
                x.iter().map(|v| v + r * rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect();
        let result = su.target.observe(1.0, r * r).and_then(|post| {
            let mut worst = 0.0f64;
            let mut mean = vec![0.0; d];
            for y in &ys {
                let score = su.target.score_q(r, y)?;
                post.mean_into(y, &mut mean);
                for j in 0..d {
                    let tweedie = (mean[j] - y[j]) / (r * r);
                    worst = worst.max((score[j] - tweedie).abs() / tweedie.abs().max(1.0));
                }
            }
            Ok(worst)
        });
        checks.push(match result {
            Ok(w) => Check::measured("tweedie_score", r, w, 1e-6).note("t field holds the noise level r"),
            Err(e) => Check::new("tweedie_score", Status::Fail).note(e.to_string()),
        });
    }

    match TunedDrift::new(s.clone(), su.target.clone(), DiffusionCoefficient::follmer(s)) {
        Ok(_) => checks.push(Check::new("tuned_drift_boundary: g^F", Status::Pass)),
        Err(e) => checks.push(Check::new("tuned_drift_boundary: g^F", Status::Fail).note(e.to_string())),
    }
    if ctx.config.g != follmer_core::drift::GSpec::Baseline {
        let name = format!("tuned_drift_boundary: {}", su.g.descriptor());
        match TunedDrift::new(s.clone(), su.target.clone(), su.g.clone()) {
            Ok(_) => checks.push(Check::new(name, Status::Pass)),
            Err(e) => checks.push(Check::new(name, Status::Fail).note(e.to_string())),
        }
    }
    checks
}

#[derive(Serialize)]
struct DiagnoseReport {
    schedule: String,
    target: String,
    checks: Vec<Check>,
    failed: Vec<String>,
}

pub fn diagnose(ctx: &Context) -> Result<(), CliError> {
    let su = setup(ctx)?;
    let checks = diagnostics(ctx, &su);
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| c.status == Status::Fail)
        .map(|c| match c.t {
            Some(t) => format!("{} (t = {t})", c.name),
            None => c.name.clone(),
        })
        .collect();
    for c in &checks {
        let status = match c.status {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::Skipped => "skipped",
        };
        match c.t {
            Some(t) => println!("{status:>7}  {} @ {t}", c.name),
            None => println!("{status:>7}  {}", c.name),
        }
    }
    let report = DiagnoseReport {
        schedule: su.schedule.name.clone(),
        target: su.target.descriptor(),
        checks,
        failed: failed.clone(),
    };
    let mut out = RunOutput::create(&ctx.out)?;
    out.write_json("diagnose.json", &report)?;
    out.finish("diagnose", &ctx.config)?;
    if !failed.is_empty() {
        return Err(CliError::Check(format!("failed diagnostics: {}", failed.join(", "))));
    }
    Ok(())
}
