use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use super::AnalysisError;
use crate::drift::RegressionEstimator;
use crate::quadrature::GaussLegendre;
use crate::schedule::{noise_level_map, Schedule};
use crate::sde::derive_task_seed;
use crate::target::Target;
use crate::StreamRng;

/// Smallest noise level kept in the `r` integral.
pub const R_MIN: f64 = 1e-4;
/// Default upper truncation of the `r` integral.
pub const R_MAX_DEFAULT: f64 = 50.0;
pub const R_NODES: usize = 256;
const T_PANELS: usize = 128;
const T_ORDER: usize = 8;
const TAIL_FRACTION: f64 = 0.01;

/// Closed-form perturbations of the exact score `∇ log q_r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SyntheticError {
    Zero,
    /// `ŝ_r = ∇ log q_r + c e^{−r} u` with `u` normalised to unit length.
    ExponentialDecay { amplitude: f64, direction: Vec<f64> },
    /// `ŝ_r = (1 + c e^{−r}) ∇ log q_r`.
    ScaledScore { amplitude: f64 },
}

/// How the approximate score `ŝ_r` is produced.
#[derive(Debug, Clone)]
pub enum ScoreErrorModel {
    Synthetic(SyntheticError),
    /// `ŝ_r` implied by a drift estimator fitted on `schedule`, read at the
    /// time where the schedule's noise level equals `r`.
    FromEstimator {
        schedule: Schedule,
        estimator: Arc<RegressionEstimator>,
    },
}

impl ScoreErrorModel {
    pub fn zero() -> Self {
        Self::Synthetic(SyntheticError::Zero)
    }

    pub fn exponential_decay(amplitude: f64, direction: Vec<f64>) -> Self {
        Self::Synthetic(SyntheticError::ExponentialDecay { amplitude, direction })
    }

    pub fn validate(&self, dim: usize) -> Result<(), AnalysisError> {
        match self {
            Self::Synthetic(SyntheticError::ExponentialDecay { amplitude, direction }) => {
                if direction.len() != dim {
                    return Err(AnalysisError::Domain(format!(
                        "error direction has length {}, target dimension is {dim}",
                        direction.len()
                    )));
                }
                if !(direction.iter().map(|u| u * u).sum::<f64>() > 0.0) || !amplitude.is_finite() {
                    return Err(AnalysisError::Domain("error direction must be non-zero".into()));
                }
                Ok(())
            }
            Self::Synthetic(SyntheticError::ScaledScore { amplitude }) if !amplitude.is_finite() => {
                Err(AnalysisError::Domain("amplitude must be finite".into()))
            }
            Self::FromEstimator { estimator, .. } if estimator.dim != dim => Err(AnalysisError::Domain(format!(
                "estimator dimension {} does not match target dimension {dim}",
                estimator.dim
            ))),
            _ => Ok(()),
        }
    }

    /// `ŝ_r(y)` given the exact score at `y`.
    fn approximate(&self, r: f64, y: &[f64], exact: &[f64], out: &mut [f64]) {
        match self {
            Self::Synthetic(SyntheticError::Zero) => out.copy_from_slice(exact),
            Self::Synthetic(SyntheticError::ExponentialDecay { amplitude, direction }) => {
                let norm = direction.iter().map(|u| u * u).sum::<f64>().sqrt();
                let w = amplitude * (-r).exp() / norm;
                for i in 0..out.len() {
                    out[i] = exact[i] + w * direction[i];
                }
            }
            Self::Synthetic(SyntheticError::ScaledScore { amplitude }) => {
                let w = 1.0 + amplitude * (-r).exp();
                for i in 0..out.len() {
                    out[i] = w * exact[i];
                }
            }
            Self::FromEstimator { schedule, estimator } => {
                // b̂_t(x) = (β̇/β) x + (tσD/β²) ŝ_r(x/β) with x = β y.
                let t = noise_map_inverse(schedule, r);
                let (b, bd) = (schedule.beta(t), schedule.beta_dot(t));
                let (sg, sd) = (schedule.sigma(t), schedule.sigma_dot(t));
                let weight = t * sg * (bd * sg - b * sd) / (b * b);
                let x: SmallVec<[f64; 8]> = y.iter().map(|v| b * v).collect();
                estimator.eval_into(t, &x, out);
                for i in 0..out.len() {
                    out[i] = (out[i] - bd * y[i]) / weight;
                }
            }
        }
    }

    /// Bound on `2∫_{r_max}^∞ r E|ŝ_r − ∇ log q_r|² dr`, when one is known.
    pub fn tail_envelope(&self, r_max: f64, dim: usize) -> Option<f64> {
        match self {
            Self::Synthetic(SyntheticError::Zero) => Some(0.0),
            Self::Synthetic(SyntheticError::ExponentialDecay { amplitude, .. }) => {
                Some(amplitude * amplitude * (-2.0 * r_max).exp() * (r_max + 0.5))
            }
            // Uses E|∇ log q_r|² ≤ d / r².
            Self::Synthetic(SyntheticError::ScaledScore { amplitude }) => {
                Some(amplitude * amplitude * dim as f64 * (-2.0 * r_max).exp() / r_max)
            }
            Self::FromEstimator { .. } => None,
        }
    }
}

fn noise_map_inverse(s: &Schedule, r: f64) -> f64 {
    // Bisection on the decreasing map t ↦ √t σ_t / β_t.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if s.noise_level(mid) > r {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// `E_{x★, z} |ŝ_r − ∇ log q_r|²(x★ + r z)` by Monte Carlo.
fn error_second_moment(
    target: &dyn Target,
    err: &ScoreErrorModel,
    r: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, AnalysisError> {
    let d = target.dim();
    let mut rng = StreamRng::seed_from_u64(seed);
    let mut y: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, d);
    let mut approx: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, d);
    let mut total = 0.0;
    for _ in 0..samples {
        target.draw(&mut rng, &mut y);
        for v in y.iter_mut() {
            *v += r * rng.sample::<f64, _>(StandardNormal);
        }
        let exact = target.score_q(r, &y)?;
        err.approximate(r, &y, &exact, &mut approx);
        total += approx.iter().zip(&exact).map(|(a, e)| (a - e) * (a - e)).sum::<f64>();
    }
    Ok(total / samples as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlStarReport {
    pub value: f64,
    pub r_nodes: Vec<f64>,
    /// `2 r E|ŝ_r − ∇ log q_r|²` at each node.
    pub integrand: Vec<f64>,
    pub r_max: f64,
    pub tail_envelope: Option<f64>,
    pub mc_samples: usize,
    pub seed: u64,
}

/// `KL★ = 2 ∫ r E|∇ log q_r(x★ + r z) − ŝ_r(x★ + r z)|² dr` over
/// `[10⁻⁴, r_max]`, by the trapezoid rule on 256 log-spaced nodes.
pub fn kl_star(
    target: &dyn Target,
    err: &ScoreErrorModel,
    r_max: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<KlStarReport, AnalysisError> {
    err.validate(target.dim())?;
    if !(r_max > R_MIN && r_max.is_finite()) || mc_samples == 0 {
        return Err(AnalysisError::Domain(format!(
            "need r_max > {R_MIN} and mc_samples > 0, got {r_max} and {mc_samples}"
        )));
    }
    let (la, lb) = (R_MIN.ln(), r_max.ln());
    let r_nodes: Vec<f64> = (0..R_NODES)
        .map(|i| (la + (lb - la) * i as f64 / (R_NODES - 1) as f64).exp())
        .collect();
    let integrand: Vec<f64> = r_nodes
        .par_iter()
        .enumerate()
        .map(|(i, &r)| {
            error_second_moment(target, err, r, mc_samples, derive_task_seed(seed, 4, i as u64))
                .map(|m| 2.0 * r * m)
        })
        .collect::<Result<_, _>>()?;
    // Trapezoid in u = ln r, where dr = r du.
    let h = (lb - la) / (R_NODES - 1) as f64;
    let value: f64 = (0..R_NODES - 1)
        .map(|i| 0.5 * h * (integrand[i] * r_nodes[i] + integrand[i + 1] * r_nodes[i + 1]))
        .sum();
    let tail = err.tail_envelope(r_max, target.dim());
    if let Some(tail) = tail {
        if tail > TAIL_FRACTION * value && tail > 1e-300 {
            return Err(AnalysisError::Truncation { tail, partial: value });
        }
    }
    Ok(KlStarReport {
        value,
        r_nodes,
        integrand,
        r_max,
        tail_envelope: tail,
        mc_samples,
        seed,
    })
}

/// The same integral written in the time variable of `s`,
/// `∫ 2 max{0, r_t (−ṙ_t)} E|…|²(r_t) dt`, over the times whose noise level
/// lies in `[10⁻⁴, r_max]`. Uses Gauss–Legendre panels uniform in `logit t`.
pub fn kl_star_in_time(
    s: &Schedule,
    target: &dyn Target,
    err: &ScoreErrorModel,
    r_max: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<f64, AnalysisError> {
    err.validate(target.dim())?;
    let map = noise_level_map(s).map_err(AnalysisError::Monotonicity)?;
    let t_lo = map.inverse(r_max);
    let t_hi = map.inverse(R_MIN);
    if !(t_lo > 0.0 && t_hi < 1.0 && t_lo < t_hi) {
        return Err(AnalysisError::Domain(format!(
            "{}: noise-level window [{R_MIN}, {r_max}] maps to [{t_lo}, {t_hi}]",
            s.name
        )));
    }
    let logit = |t: f64| (t / (1.0 - t)).ln();
    let (ua, ub) = (logit(t_lo), logit(t_hi));
    let gl = GaussLegendre::new(T_ORDER);
    let width = (ub - ua) / T_PANELS as f64;
    let nodes: Vec<(f64, f64)> = (0..T_PANELS)
        .flat_map(|p| {
            let a = ua + p as f64 * width;
            gl.mapped(a, a + width).collect::<Vec<_>>()
        })
        .collect();
    let parts: Vec<f64> = nodes
        .par_iter()
        .enumerate()
        .map(|(i, &(u, w))| {
            let t = 1.0 / (1.0 + (-u).exp());
            let r = s.noise_level(t);
            let rate = (r * -s.noise_level_dot(t)).max(0.0);
            if rate == 0.0 {
                return Ok(0.0);
            }
            let m = error_second_moment(target, err, r, mc_samples, derive_task_seed(seed, 5, i as u64))?;
            Ok(w * t * (1.0 - t) * 2.0 * rate * m)
        })
        .collect::<Result<_, AnalysisError>>()?;
    Ok(parts.iter().sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleKl {
    pub schedule: String,
    pub total: f64,
    /// `|total − KL★| / KL★`.
    pub gap_vs_kl_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub kl_star: f64,
    pub schedules: Vec<ScheduleKl>,
    /// Largest pairwise relative gap between schedule totals.
    pub max_gap: f64,
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Evaluates KL★ through the time parametrisation of each schedule and
/// compares the totals with each other and with [`kl_star`].
pub fn invariance_check(
    schedules: &[Schedule],
    target: &dyn Target,
    err: &ScoreErrorModel,
    r_max: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<InvarianceReport, AnalysisError> {
    if schedules.is_empty() {
        return Err(AnalysisError::Domain("no schedules given".into()));
    }
    let star = kl_star(target, err, r_max, mc_samples, seed)?.value;
    let totals: Vec<f64> = schedules
        .iter()
        .map(|s| kl_star_in_time(s, target, err, r_max, mc_samples, seed))
        .collect::<Result<_, _>>()?;
    let mut max_gap = 0.0f64;
    for i in 0..totals.len() {
        for j in i + 1..totals.len() {
            max_gap = max_gap.max(relative_gap(totals[i], totals[j]));
        }
    }
    Ok(InvarianceReport {
        kl_star: star,
        schedules: schedules
            .iter()
            .zip(&totals)
            .map(|(s, &total)| ScheduleKl {
                schedule: s.name.to_string(),
                total,
                gap_vs_kl_star: if star == 0.0 { relative_gap(total, star) } else { (total - star).abs() / star },
            })
            .collect(),
        max_gap,
    })
}
