//! Path-space KL between exact and estimated diffusions, the
//! schedule-free KL★, identity checks and two-sample distances.

mod energy;
mod invariance;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::drift::{interpolate, DiffusionCoefficient, DriftError, DriftField};
use crate::quadrature::{integrate, QuadratureError, Tolerance};
use crate::schedule::{Schedule, ScheduleError};
use crate::sde::{derive_path_seed, derive_task_seed};
use crate::target::{Target, TargetError};
use crate::{ScalarFn, StreamRng};

pub use energy::{energy_distance, energy_test, EnergyTest, MIN_TEST_SAMPLES};
pub use invariance::{
    invariance_check, kl_star, kl_star_in_time, InvarianceReport, KlStarReport, ScheduleKl,
    ScoreErrorModel, SyntheticError, R_MAX_DEFAULT, R_MIN, R_NODES,
};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{0}")]
    Domain(String),
    #[error("noise level is not monotone: {0}")]
    Monotonicity(ScheduleError),
    #[error("tail beyond r_max is bounded by {tail:.3e}, more than 1% of the partial integral {partial:.3e}")]
    Truncation { tail: f64, partial: f64 },
    #[error("need at least {need} samples, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

const BLOCK: usize = 4096;
const REPORT_POINTS: usize = 200;

/// Per-time drift mismatch `L_t = E|b̂_t(I_t) − b_t(I_t)|²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftErrorMoments {
    pub t_grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub mc_samples: usize,
    pub seed: u64,
}

impl DriftErrorMoments {
    pub fn profile(&self) -> ErrorProfile {
        ErrorProfile::Table {
            times: self.t_grid.clone(),
            values: self.mean.clone(),
        }
    }
}

/// Monte Carlo estimate of `L_t` on `t_grid`, sampling
/// `x_t = β_t x★ + √t σ_t z`.
pub fn drift_error_moments(
    s: &Schedule,
    target: &dyn Target,
    exact: &dyn DriftField,
    approx: &dyn DriftField,
    t_grid: &[f64],
    mc_samples: usize,
    seed: u64,
) -> Result<DriftErrorMoments, AnalysisError> {
    let d = target.dim();
    if exact.dim() != d || approx.dim() != d {
        return Err(AnalysisError::Domain(format!(
            "drift dimensions ({}, {}) do not match target dimension {d}",
            exact.dim(),
            approx.dim()
        )));
    }
    if mc_samples < 2 {
        return Err(AnalysisError::InsufficientSamples { need: 2, got: mc_samples });
    }
    let blocks = mc_samples.div_ceil(BLOCK);
    let jobs: Vec<(usize, usize)> = (0..t_grid.len())
        .flat_map(|k| (0..blocks).map(move |b| (k, b)))
        .collect();
    let sums: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(k, b)| {
            let t = t_grid[k];
            let fe = exact.freeze(t)?;
            let fa = approx.freeze(t)?;
            let (beta, noise) = (s.beta(t), t.sqrt() * s.sigma(t));
            let mut rng = StreamRng::seed_from_u64(derive_path_seed(derive_task_seed(seed, 2, k as u64), b as u64));
            let count = BLOCK.min(mc_samples - b * BLOCK);
            let mut xs: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, d);
            let mut be: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, d);
            let mut ba: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, d);
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                target.draw(&mut rng, &mut xs);
                for v in xs.iter_mut() {
                    *v = beta * *v + noise * rng.sample::<f64, _>(StandardNormal);
                }
                fe.eval_into(&xs, &mut be);
                fa.eval_into(&xs, &mut ba);
                let e: f64 = be.iter().zip(&ba).map(|(a, b)| (a - b) * (a - b)).sum();
                s1 += e;
                s2 += e * e;
            }
            Ok((s1, s2))
        })
        .collect::<Result<_, AnalysisError>>()?;
    let n = mc_samples as f64;
    let mut mean = Vec::with_capacity(t_grid.len());
    let mut std_error = Vec::with_capacity(t_grid.len());
    for k in 0..t_grid.len() {
        let (s1, s2) = sums[k * blocks..(k + 1) * blocks]
            .iter()
            .fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
        let m = s1 / n;
        let var = ((s2 - n * m * m) / (n - 1.0)).max(0.0);
        mean.push(m);
        std_error.push((var / n).sqrt());
    }
    Ok(DriftErrorMoments {
        t_grid: t_grid.to_vec(),
        mean,
        std_error,
        mc_samples,
        seed,
    })
}

/// `L_t` as consumed by [`kl_path`].
#[derive(Clone)]
pub enum ErrorProfile {
    Constant(f64),
    /// Linear interpolation, held constant outside the table.
    Table { times: Vec<f64>, values: Vec<f64> },
    Function(ScalarFn),
}

impl std::fmt::Debug for ErrorProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::Table { times, .. } => write!(f, "Table({} points)", times.len()),
            Self::Function(_) => write!(f, "Function"),
        }
    }
}

impl ErrorProfile {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::Table { times, values } => interpolate(times, values, t),
            Self::Function(f) => f(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub t_grid: Vec<f64>,
    /// `½ g⁻² |1 + ½ β A (g² − σ²)|² L_t` on `t_grid`.
    pub integrand: Vec<f64>,
    #[serde(rename = "L")]
    pub l_values: Vec<f64>,
    pub total: f64,
    pub error_estimate: f64,
    pub g_descriptor: String,
    pub delta: f64,
}

fn kl_integrand(s: &Schedule, g: f64, l: f64, t: f64) -> f64 {
    let sg = s.sigma(t);
    let factor = 1.0 + 0.5 * s.beta(t) * s.big_a(t) * (g * g - sg * sg);
    0.5 * factor * factor * l / (g * g)
}

/// Path-space KL `½ ∫_0^{1−δ} g⁻² |1 + ½ β A (g² − σ²)|² L_t dt`.
pub fn kl_path(
    s: &Schedule,
    g: &DiffusionCoefficient,
    l: &ErrorProfile,
    delta: f64,
) -> Result<KlReport, AnalysisError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AnalysisError::Domain(format!("truncation δ = {delta} must lie in (0, 1)")));
    }
    let end = 1.0 - delta;
    let t_grid: Vec<f64> = (1..=REPORT_POINTS).map(|k| end * k as f64 / REPORT_POINTS as f64).collect();
    for &t in std::iter::once(&0.0).chain(&t_grid) {
        let gt = g.eval(t);
        if !(gt > 0.0) {
            return Err(AnalysisError::Domain(format!(
                "g = {gt} at t = {t}; g must be positive on [0, {end}]"
            )));
        }
    }
    let l_values: Vec<f64> = t_grid.iter().map(|&t| l.eval(t)).collect();
    if l_values.iter().any(|v| !(*v >= 0.0)) {
        return Err(AnalysisError::Domain("L_t must be non-negative".into()));
    }
    let integrand: Vec<f64> = t_grid
        .iter()
        .zip(&l_values)
        .map(|(&t, &lv)| kl_integrand(s, g.eval(t), lv, t))
        .collect();
    let scale = integrand.iter().fold(0.0f64, |m, v| m.max(*v));
    if scale == 0.0 && l_values.iter().all(|v| *v == 0.0) && matches!(l, ErrorProfile::Constant(_)) {
        return Ok(KlReport {
            t_grid,
            integrand,
            l_values,
            total: 0.0,
            error_estimate: 0.0,
            g_descriptor: g.descriptor().to_string(),
            delta,
        });
    }
    let tol = Tolerance::new(1e-9 * scale.max(1e-300), 1e-10).with_max_intervals(20_000);
    let res = integrate(|t| kl_integrand(s, g.eval(t), l.eval(t), t), 0.0, end, tol)?;
    Ok(KlReport {
        t_grid,
        integrand,
        l_values,
        total: res.value,
        error_estimate: res.error,
        g_descriptor: g.descriptor().to_string(),
        delta,
    })
}

/// Pointwise minimiser of `ψ(g²) = g⁻² (γ + α g²)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalG {
    pub t: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub g_sq: f64,
    pub psi_min: f64,
}

impl OptimalG {
    pub fn g(&self) -> f64 {
        self.g_sq.sqrt()
    }
}

pub fn psi(alpha: f64, gamma: f64, g_sq: f64) -> f64 {
    let v = gamma + alpha * g_sq;
    v * v / g_sq
}

/// Minimum of `ψ` for `α > 0`: attained at `g² = |γ|/α` with value `4αγ`
/// when `γ > 0` and `0` otherwise.
pub fn minimize_psi(alpha: f64, gamma: f64) -> (f64, f64) {
    let g_sq = gamma.abs() / alpha;
    let min = if gamma > 0.0 { 4.0 * alpha * gamma } else { 0.0 };
    (g_sq, min)
}

pub fn optimal_g(s: &Schedule, t: f64) -> Result<OptimalG, AnalysisError> {
    if !(t > 0.0 && t < 1.0) {
        return Err(AnalysisError::Domain(format!("t = {t} must lie in (0, 1)")));
    }
    let (alpha, gamma) = (s.alpha(t), s.gamma(t));
    let (g_sq, psi_min) = minimize_psi(alpha, gamma);
    Ok(OptimalG {
        t,
        alpha,
        gamma,
        g_sq,
        psi_min,
    })
}

/// Both sides of `β²_{1−t} ∫_0^t β⁻²_{1−u} (g^F_{1−u})² du = (1−t) σ²_{1−t}`
/// (one dimension).
pub fn variance_identity_check(s: &Schedule, t: f64) -> Result<(f64, f64), AnalysisError> {
    if !(t > 0.0 && t < 1.0) {
        return Err(AnalysisError::Domain(format!("t = {t} must lie in (0, 1)")));
    }
    let f = |u: f64| {
        let b = s.beta(1.0 - u);
        s.g_follmer_sq(1.0 - u) / (b * b)
    };
    let tol = Tolerance::new(1e-14, 1e-13).with_max_intervals(10_000);
    let integral = match integrate(f, 0.0, t, tol) {
        Ok(r) => r.value,
        // Endpoint substitution: integrate in w = √(t − u) to soften a
        // square-root kink at u = t.
        Err(QuadratureError::NotConverged { .. }) => {
            integrate(|w: f64| 2.0 * w * f(t - w * w), 0.0, t.sqrt(), tol)?.value
        }
        Err(e) => return Err(e.into()),
    };
    let b = s.beta(1.0 - t);
    let sg = s.sigma(1.0 - t);
    Ok((b * b * integral, (1.0 - t) * sg * sg))
}
