//! Interpolation schedules `(β_t, σ_t)` and every scalar coefficient derived
//! from them.
//!
//! Schedules carry analytic first derivatives; [`validate_schedule`]
//! cross-checks them against finite differences together with the structural
//! conditions `β_0 = 0`, `β_1 = 1`, `σ_1 = 0`, `σ_0 > 0`, `β̇ > 0`, `σ̇ < 0`.

mod reference;

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::QuadratureError;
use crate::{scalar_fn, ScalarFn};

pub use reference::{follmer_schedule_data, FollmerScheduleData};

/// Number of points in the uniform validation grid (endpoints included).
pub const VALIDATION_GRID: usize = 1001;

/// Time at which continuous extensions at `t = 0` are probed numerically.
const ORIGIN_PROBE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("time {0} is outside [0, 1]")]
    Domain(f64),
    #[error("{what} is not finite at t = {t}")]
    NonFinite { what: &'static str, t: f64 },
    #[error("schedule is singular at interior time t = {t} (sigma_t = 0)")]
    Singular { t: f64 },
    #[error("noise-level map is not monotone on [{from}, {to}]")]
    NonMonotone { from: f64, to: f64 },
    #[error("degenerate reference process: eps = {eps:e}")]
    DegenerateReference { eps: f64 },
    #[error("unknown schedule `{0}`")]
    UnknownName(String),
    #[error("invalid schedule parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// An interpolation schedule with analytic derivatives.
#[derive(Clone)]
pub struct Schedule {
    pub name: String,
    pub beta: ScalarFn,
    pub beta_dot: ScalarFn,
    /// Second derivative of β at 0, when known.
    pub beta_ddot_at_0: Option<f64>,
    pub sigma: ScalarFn,
    pub sigma_dot: ScalarFn,
    /// Set when `β̇_0 = 0`; the tuned drift with `g^F` then has a `-p x / t`
    /// restoring singularity at the origin.
    pub beta_dot_zero_at_origin: bool,
    /// Upper end of the interval on which the schedule is checked and
    /// evaluated away from the terminal limit (`1` unless σ is not C¹ at 1).
    pub validation_end: f64,
}

impl fmt::Debug for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Schedule")
            .field("name", &self.name)
            .field("beta_ddot_at_0", &self.beta_ddot_at_0)
            .field("beta_dot_zero_at_origin", &self.beta_dot_zero_at_origin)
            .field("validation_end", &self.validation_end)
            .finish()
    }
}

/// Catalog entry for a schedule, as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// β = t, σ = 1 − t.
    LinearLinear,
    /// β = t, σ = √(1 − t).
    LinearSqrt,
    /// β = t², σ = 1 − t.
    QuadraticLinear,
    /// β = sin²(πt/2), σ = cos(πt/2).
    Trigonometric,
    /// β = 1 − (1 − t)^n, σ = 1 − t^m. `n = m = 1` is linear-linear; large
    /// exponents break monotonicity of `β/(√t σ)`.
    Power { beta_power: f64, sigma_power: f64 },
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<Schedule, ScheduleError> {
        Ok(match *self {
            ScheduleSpec::LinearLinear => Schedule::linear_linear(),
            ScheduleSpec::LinearSqrt => Schedule::linear_sqrt(),
            ScheduleSpec::QuadraticLinear => Schedule::quadratic_linear(),
            ScheduleSpec::Trigonometric => Schedule::trigonometric(),
            ScheduleSpec::Power {
                beta_power,
                sigma_power,
            } => Schedule::power(beta_power, sigma_power)?,
        })
    }

    pub fn catalog() -> Vec<ScheduleSpec> {
        vec![
            ScheduleSpec::LinearLinear,
            ScheduleSpec::LinearSqrt,
            ScheduleSpec::QuadraticLinear,
            ScheduleSpec::Trigonometric,
        ]
    }
}

impl Schedule {
    pub fn linear_linear() -> Self {
        Self {
            name: "linear-linear".into(),
            beta: scalar_fn(|t| t),
            beta_dot: scalar_fn(|_| 1.0),
            beta_ddot_at_0: Some(0.0),
            sigma: scalar_fn(|t| 1.0 - t),
            sigma_dot: scalar_fn(|_| -1.0),
            beta_dot_zero_at_origin: false,
            validation_end: 1.0,
        }
    }

    /// σ is not differentiable at `t = 1`; formulas hold on `[0, 1)`.
    pub fn linear_sqrt() -> Self {
        Self {
            name: "linear-sqrt".into(),
            beta: scalar_fn(|t| t),
            beta_dot: scalar_fn(|_| 1.0),
            beta_ddot_at_0: Some(0.0),
            sigma: scalar_fn(|t| (1.0 - t).max(0.0).sqrt()),
            sigma_dot: scalar_fn(|t| -0.5 / (1.0 - t).sqrt()),
            beta_dot_zero_at_origin: false,
            validation_end: 1.0 - 1e-9,
        }
    }

    pub fn quadratic_linear() -> Self {
        Self {
            name: "quadratic-linear".into(),
            beta: scalar_fn(|t| t * t),
            beta_dot: scalar_fn(|t| 2.0 * t),
            beta_ddot_at_0: Some(2.0),
            sigma: scalar_fn(|t| 1.0 - t),
            sigma_dot: scalar_fn(|_| -1.0),
            beta_dot_zero_at_origin: true,
            validation_end: 1.0,
        }
    }

    pub fn trigonometric() -> Self {
        Self {
            name: "trigonometric".into(),
            beta: scalar_fn(|t| {
                let s = (0.5 * PI * t).sin();
                s * s
            }),
            beta_dot: scalar_fn(|t| 0.5 * PI * (PI * t).sin()),
            beta_ddot_at_0: Some(0.5 * PI * PI),
            sigma: scalar_fn(|t| (0.5 * PI * t).cos()),
            sigma_dot: scalar_fn(|t| -0.5 * PI * (0.5 * PI * t).sin()),
            beta_dot_zero_at_origin: true,
            validation_end: 1.0,
        }
    }

    pub fn power(beta_power: f64, sigma_power: f64) -> Result<Self, ScheduleError> {
        if !(beta_power >= 1.0 && beta_power.is_finite()) {
            return Err(ScheduleError::InvalidParameter(format!(
                "beta_power must be >= 1, got {beta_power}"
            )));
        }
        if !(sigma_power >= 1.0 && sigma_power.is_finite()) {
            return Err(ScheduleError::InvalidParameter(format!(
                "sigma_power must be >= 1, got {sigma_power}"
            )));
        }
        let (n, m) = (beta_power, sigma_power);
        Ok(Self {
            name: format!("power(n={n},m={m})"),
            beta: scalar_fn(move |t| 1.0 - (1.0 - t).powf(n)),
            beta_dot: scalar_fn(move |t| n * (1.0 - t).powf(n - 1.0)),
            beta_ddot_at_0: Some(-n * (n - 1.0)),
            sigma: scalar_fn(move |t| 1.0 - t.powf(m)),
            sigma_dot: scalar_fn(move |t| -m * t.powf(m - 1.0)),
            beta_dot_zero_at_origin: false,
            validation_end: 1.0,
        })
    }

    /// Looks up a built-in schedule by name.
    pub fn from_name(name: &str) -> Result<Self, ScheduleError> {
        match name {
            "linear-linear" => Ok(Self::linear_linear()),
            "linear-sqrt" | "linear-square-root" => Ok(Self::linear_sqrt()),
            "quadratic-linear" => Ok(Self::quadratic_linear()),
            "trigonometric" => Ok(Self::trigonometric()),
            other => Err(ScheduleError::UnknownName(other.to_string())),
        }
    }

    pub fn catalog() -> Vec<Schedule> {
        vec![
            Self::linear_linear(),
            Self::linear_sqrt(),
            Self::quadratic_linear(),
            Self::trigonometric(),
        ]
    }

    #[inline]
    pub fn beta(&self, t: f64) -> f64 {
        (self.beta)(t)
    }
    #[inline]
    pub fn beta_dot(&self, t: f64) -> f64 {
        (self.beta_dot)(t)
    }
    #[inline]
    pub fn sigma(&self, t: f64) -> f64 {
        (self.sigma)(t)
    }
    #[inline]
    pub fn sigma_dot(&self, t: f64) -> f64 {
        (self.sigma_dot)(t)
    }

    /// `β̇σ − βσ̇`, positive on `(0, 1)` for valid schedules.
    #[inline]
    pub fn cross(&self, t: f64) -> f64 {
        self.beta_dot(t) * self.sigma(t) - self.beta(t) * self.sigma_dot(t)
    }

    /// `A_t = (t σ_t (β̇_t σ_t − β_t σ̇_t))^{-1}`; infinite at the endpoints.
    pub fn big_a(&self, t: f64) -> f64 {
        if t <= 0.0 || t >= 1.0 {
            return f64::INFINITY;
        }
        1.0 / (t * self.sigma(t) * self.cross(t))
    }

    /// `α_t = β_t A_t / 2`.
    pub fn alpha(&self, t: f64) -> f64 {
        0.5 * self.beta(t) * self.big_a(t)
    }

    /// `γ_t = 1 − α_t σ_t²`.
    pub fn gamma(&self, t: f64) -> f64 {
        let s = self.sigma(t);
        1.0 - self.alpha(t) * s * s
    }

    /// Signed `2tσ(β̇σ/β − σ̇) − σ²` (equal to `γ_t / α_t`), whose absolute value
    /// is `(g^F_t)²`. Valid for `t ∈ (0, 1)`.
    pub fn follmer_gap(&self, t: f64) -> f64 {
        let (b, bd, s, sd) = (
            self.beta(t),
            self.beta_dot(t),
            self.sigma(t),
            self.sigma_dot(t),
        );
        2.0 * t * s * (bd * s / b - sd) - s * s
    }

    /// `(g^F_t)²` with its continuous extensions at both endpoints.
    pub fn g_follmer_sq(&self, t: f64) -> f64 {
        if t >= 1.0 {
            return 0.0;
        }
        if t <= 0.0 {
            let s0 = self.sigma(0.0);
            if self.beta_dot(0.0) > 0.0 {
                return s0 * s0;
            }
            return self.follmer_gap(ORIGIN_PROBE).abs();
        }
        self.follmer_gap(t).abs()
    }

    pub fn g_follmer(&self, t: f64) -> f64 {
        self.g_follmer_sq(t).sqrt()
    }

    /// Reference drift rate `a_t = d/dt log((β² + tσ²)/β)`, evaluated
    /// analytically from the schedule and its derivatives.
    pub fn a_ref(&self, t: f64) -> f64 {
        if t <= 0.0 {
            let bd0 = self.beta_dot(0.0);
            if bd0 <= 0.0 {
                return f64::NEG_INFINITY;
            }
            return match self.beta_ddot_at_0 {
                Some(bdd0) => {
                    let (s0, sd0) = (self.sigma(0.0), self.sigma_dot(0.0));
                    let f0 = s0 * s0 / bd0;
                    let df0 = bd0 + 2.0 * s0 * sd0 / bd0 - s0 * s0 * bdd0 / (2.0 * bd0 * bd0);
                    df0 / f0
                }
                None => self.a_ref(ORIGIN_PROBE),
            };
        }
        let (b, bd, s, sd) = (
            self.beta(t),
            self.beta_dot(t),
            self.sigma(t),
            self.sigma_dot(t),
        );
        let var = b * b + t * s * s;
        (2.0 * b * bd + s * s + 2.0 * t * s * sd) / var - bd / b
    }

    /// Noise level `r(t) = √t σ_t / β_t`; `+∞` at 0 and `0` at 1.
    pub fn noise_level(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return f64::INFINITY;
        }
        if t >= 1.0 {
            return 0.0;
        }
        t.sqrt() * self.sigma(t) / self.beta(t)
    }

    /// Time derivative of [`Schedule::noise_level`].
    pub fn noise_level_dot(&self, t: f64) -> f64 {
        let r = self.noise_level(t);
        r * (0.5 / t + self.sigma_dot(t) / self.sigma(t) - self.beta_dot(t) / self.beta(t))
    }

    /// Marginal variance factor `β_t² + t σ_t²` of the interpolant with a
    /// standard normal target.
    pub fn reference_variance(&self, t: f64) -> f64 {
        let (b, s) = (self.beta(t), self.sigma(t));
        b * b + t * s * s
    }

    pub fn follmer_g(&self) -> ScalarFn {
        let s = self.clone();
        scalar_fn(move |t| s.g_follmer(t))
    }

    pub fn sigma_fn(&self) -> ScalarFn {
        self.sigma.clone()
    }

    pub fn a_ref_fn(&self) -> ScalarFn {
        let s = self.clone();
        scalar_fn(move |t| s.a_ref(t))
    }
}

/// Every scalar derived from a schedule at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCoefficients {
    pub t: f64,
    #[serde(rename = "A")]
    pub a: f64,
    pub g_baseline: f64,
    pub g_follmer: f64,
    pub a_ref: f64,
    pub noise_level: f64,
}

pub fn coefficients_at(s: &Schedule, t: f64) -> Result<ScheduleCoefficients, ScheduleError> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(ScheduleError::Domain(t));
    }
    if t > 0.0 && t < 1.0 && s.sigma(t) == 0.0 {
        return Err(ScheduleError::Singular { t });
    }
    let c = ScheduleCoefficients {
        t,
        a: s.big_a(t),
        g_baseline: s.sigma(t),
        g_follmer: s.g_follmer(t),
        a_ref: if t >= 1.0 { s.a_ref(s.validation_end.min(1.0 - 1e-12)) } else { s.a_ref(t) },
        noise_level: s.noise_level(t),
    };
    if t > 0.0 && t < 1.0 {
        for (what, v) in [
            ("A", c.a),
            ("g_follmer", c.g_follmer),
            ("a_ref", c.a_ref),
            ("noise_level", c.noise_level),
        ] {
            if !v.is_finite() {
                return Err(ScheduleError::NonFinite { what, t });
            }
        }
    }
    Ok(c)
}

/// One violated structural condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub condition: String,
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Checks that could not be run, with the reason.
    pub skipped: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn flag(&mut self, condition: impl Into<String>, t: f64, value: f64) {
        self.violations.push(Violation {
            condition: condition.into(),
            t,
            value,
        });
    }
}

fn eval(f: &ScalarFn, what: &'static str, t: f64) -> Result<f64, ScheduleError> {
    let v = f(t);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ScheduleError::NonFinite { what, t })
    }
}

/// Five-point central difference.
fn derivative(f: &ScalarFn, t: f64, h: f64) -> f64 {
    (-f(t + 2.0 * h) + 8.0 * f(t + h) - 8.0 * f(t - h) + f(t - 2.0 * h)) / (12.0 * h)
}

/// Checks the structural conditions on a uniform grid.
///
/// At most one violation per condition is listed (the first offending `t`).
pub fn validate_schedule(s: &Schedule) -> Result<ValidationReport, ScheduleError> {
    let mut report = ValidationReport::default();
    let end = s.validation_end;

    let b0 = eval(&s.beta, "beta", 0.0)?;
    let b1 = eval(&s.beta, "beta", 1.0)?;
    let s0 = eval(&s.sigma, "sigma", 0.0)?;
    let s1 = eval(&s.sigma, "sigma", 1.0)?;
    if b0.abs() > 1e-12 {
        report.flag("beta(0) = 0", 0.0, b0);
    }
    if (b1 - 1.0).abs() > 1e-12 {
        report.flag("beta(1) = 1", 1.0, b1);
    }
    if s1.abs() > 1e-12 {
        report.flag("sigma(1) = 0", 1.0, s1);
    }
    if s0 <= 0.0 {
        report.flag("sigma(0) > 0", 0.0, s0);
    }

    let bd0 = eval(&s.beta_dot, "beta_dot", 0.0)?;
    if bd0 < 0.0 {
        report.flag("beta_dot(0) >= 0", 0.0, bd0);
    } else if bd0 == 0.0 && !s.beta_dot_zero_at_origin {
        report.flag("beta_dot(0) > 0 (singular regime flag not set)", 0.0, bd0);
    } else if bd0 > 0.0 && s.beta_dot_zero_at_origin {
        report.flag("beta_dot(0) = 0 (singular regime flag set)", 0.0, bd0);
    }

    let n = VALIDATION_GRID - 1;
    let (mut bad_bd, mut bad_sd, mut bad_fd_b, mut bad_fd_s) = (false, false, false, false);
    for i in 1..n {
        let t = i as f64 / n as f64;
        if t >= end {
            break;
        }
        let bd = eval(&s.beta_dot, "beta_dot", t)?;
        let sd = eval(&s.sigma_dot, "sigma_dot", t)?;
        eval(&s.beta, "beta", t)?;
        let sg = eval(&s.sigma, "sigma", t)?;
        if sg <= 0.0 && !bad_sd {
            report.flag("sigma(t) > 0 on (0,1)", t, sg);
        }
        if bd <= 0.0 && !bad_bd {
            bad_bd = true;
            report.flag("beta_dot(t) > 0 on (0,1)", t, bd);
        }
        if sd >= 0.0 && !bad_sd {
            bad_sd = true;
            report.flag("sigma_dot(t) < 0 on (0,1)", t, sd);
        }
        let h = 1e-3 * t.min(end - t).min(1.0);
        if h < 1e-12 {
            continue;
        }
        let fd_b = derivative(&s.beta, t, h);
        let fd_s = derivative(&s.sigma, t, h);
        if (fd_b - bd).abs() > 1e-6 * bd.abs().max(1.0) && !bad_fd_b {
            bad_fd_b = true;
            report.flag("beta_dot matches finite differences of beta", t, fd_b - bd);
        }
        if (fd_s - sd).abs() > 1e-6 * sd.abs().max(1.0) && !bad_fd_s {
            bad_fd_s = true;
            report.flag("sigma_dot matches finite differences of sigma", t, fd_s - sd);
        }
    }

    // Boundary limit of t^{-1}((g^F)² − σ²) at the origin.
    if s.beta_dot_zero_at_origin {
        report
            .skipped
            .push("origin limit of t^-1((g^F)^2 - sigma^2): singular regime (beta_dot(0) = 0)".into());
    } else if let Some(bdd0) = s.beta_ddot_at_0 {
        if bd0 > 0.0 {
            let t = 1e-6;
            let sg = s.sigma(t);
            let lhs = (s.g_follmer_sq(t) - sg * sg) / t;
            let sd0 = s.sigma_dot(0.0);
            let rhs = s0 * s0 * bdd0 / bd0 - 2.0 * sd0 * s0;
            if (lhs - rhs).abs() > 1e-3 * rhs.abs().max(1.0) {
                report.flag("origin limit of t^-1((g^F)^2 - sigma^2)", t, lhs - rhs);
            }
        }
    } else {
        report
            .skipped
            .push("origin limit of t^-1((g^F)^2 - sigma^2): beta_ddot(0) unavailable".into());
    }

    Ok(report)
}

/// The map `t ↦ r(t) = √t σ_t / β_t` on `(0, 1)` together with its inverse.
#[derive(Debug, Clone)]
pub struct NoiseLevelMap {
    schedule: Schedule,
}

impl NoiseLevelMap {
    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn r(&self, t: f64) -> f64 {
        self.schedule.noise_level(t)
    }

    /// Solves `r(t) = level` by bisection; `|t − t̂| ≤ 1e-12`.
    pub fn inverse(&self, level: f64) -> f64 {
        if level <= 0.0 {
            return 1.0;
        }
        if level.is_infinite() {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        while hi - lo > 5e-13 {
            let mid = 0.5 * (lo + hi);
            if self.r(mid) > level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Builds the noise-level map, rejecting schedules whose map is not
/// non-increasing on the validation grid (equivalently, `β/(√t σ)` must be
/// non-decreasing).
pub fn noise_level_map(s: &Schedule) -> Result<NoiseLevelMap, ScheduleError> {
    let n = VALIDATION_GRID - 1;
    let mut prev: Option<(f64, f64)> = None;
    let mut violation: Option<(f64, f64)> = None;
    for i in 1..=n {
        let t = (i as f64 / n as f64).min(s.validation_end);
        let r = s.noise_level(t);
        if r.is_nan() {
            return Err(ScheduleError::NonFinite {
                what: "noise_level",
                t,
            });
        }
        if let Some((tp, rp)) = prev {
            if r > rp * (1.0 + 1e-12) + 1e-300 {
                violation = Some(match violation {
                    None => (tp, t),
                    Some((from, _)) => (from, t),
                });
            }
        }
        prev = Some((t, r));
    }
    if let Some((from, to)) = violation {
        return Err(ScheduleError::NonMonotone { from, to });
    }
    Ok(NoiseLevelMap {
        schedule: s.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_schedules_are_valid() {
        for s in Schedule::catalog() {
            let rep = validate_schedule(&s).unwrap();
            assert!(rep.is_valid(), "{}: {:?}", s.name, rep.violations);
        }
    }

    #[test]
    fn quadratic_linear_valid_in_singular_regime() {
        let rep = validate_schedule(&Schedule::quadratic_linear()).unwrap();
        assert!(rep.is_valid());
        assert!(rep.skipped.iter().any(|m| m.contains("singular regime")));
    }

    #[test]
    fn reversed_beta_is_invalid() {
        let s = Schedule {
            name: "bad".into(),
            beta: scalar_fn(|t| 1.0 - t),
            beta_dot: scalar_fn(|_| -1.0),
            beta_ddot_at_0: Some(0.0),
            sigma: scalar_fn(|t| 1.0 - t),
            sigma_dot: scalar_fn(|_| -1.0),
            beta_dot_zero_at_origin: false,
            validation_end: 1.0,
        };
        let rep = validate_schedule(&s).unwrap();
        let conds: Vec<_> = rep.violations.iter().map(|v| v.condition.as_str()).collect();
        assert!(conds.contains(&"beta(0) = 0"), "{conds:?}");
        assert!(conds.iter().any(|c| c.starts_with("beta_dot(t) > 0")), "{conds:?}");
    }

    #[test]
    fn wrong_derivative_detected() {
        let mut s = Schedule::linear_linear();
        s.beta_dot = scalar_fn(|_| 1.1);
        let rep = validate_schedule(&s).unwrap();
        assert!(rep
            .violations
            .iter()
            .any(|v| v.condition.contains("finite differences of beta")));
    }

    #[test]
    fn non_finite_value_names_time() {
        let mut s = Schedule::linear_linear();
        s.sigma = scalar_fn(|t| if t > 0.5 { f64::NAN } else { 1.0 - t });
        let err = validate_schedule(&s).unwrap_err();
        match err {
            ScheduleError::NonFinite { what, t } => {
                assert_eq!(what, "sigma");
                assert!(t > 0.5);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn explicit_follmer_coefficients() {
        let ll = Schedule::linear_linear();
        let c = coefficients_at(&ll, 0.5).unwrap();
        assert!((c.g_follmer - 0.75f64.sqrt()).abs() < 1e-12);
        assert!(c.a_ref.abs() < 1e-14);
        assert!((c.a - 4.0).abs() < 1e-12);
        let ls = Schedule::linear_sqrt();
        let c = coefficients_at(&ls, 0.3).unwrap();
        assert!((c.g_follmer - 1.0).abs() < 1e-12);
        for s in Schedule::catalog() {
            assert_eq!(coefficients_at(&s, 1.0).unwrap().g_follmer, 0.0);
        }
    }

    #[test]
    fn a_ref_matches_finite_difference_of_log() {
        let ll = Schedule::linear_linear();
        let f = |t: f64| (t + (1.0 - t) * (1.0 - t)).ln();
        for &t in &[0.1, 0.3, 0.5, 0.8] {
            let h = 1e-5;
            let fd = (f(t + h) - f(t - h)) / (2.0 * h);
            assert!((ll.a_ref(t) - fd).abs() < 1e-8, "t={t}");
        }
        // analytic origin limit agrees with the interior values
        assert!((ll.a_ref(0.0) - ll.a_ref(1e-7)).abs() < 1e-5);
    }

    #[test]
    fn origin_extension_of_g_follmer() {
        assert!((Schedule::linear_linear().g_follmer(0.0) - 1.0).abs() < 1e-15);
        // β = t²: (g^F_0)² = 3σ_0²
        let q = Schedule::quadratic_linear();
        assert!((q.g_follmer_sq(0.0) - 3.0).abs() < 1e-6);
        let expect = |t: f64| ((1.0 - t) * (3.0 - t)).sqrt();
        for &t in &[0.1, 0.4, 0.9] {
            assert!((q.g_follmer(t) - expect(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn domain_errors() {
        let ll = Schedule::linear_linear();
        assert!(matches!(coefficients_at(&ll, -0.1), Err(ScheduleError::Domain(_))));
        assert!(matches!(coefficients_at(&ll, 1.5), Err(ScheduleError::Domain(_))));
    }

    #[test]
    fn noise_levels() {
        let ll = noise_level_map(&Schedule::linear_linear()).unwrap();
        assert!((ll.r(0.5) - 0.5 / 0.5f64.sqrt()).abs() < 1e-15);
        let ls = noise_level_map(&Schedule::linear_sqrt()).unwrap();
        assert!((ls.r(0.5) - 1.0).abs() < 1e-15);
        for s in Schedule::catalog() {
            assert_eq!(s.noise_level(1.0), 0.0);
        }
    }

    #[test]
    fn non_monotone_power_schedule_rejected() {
        let s = Schedule::power(10.0, 10.0).unwrap();
        assert!(validate_schedule(&s).unwrap().is_valid());
        match noise_level_map(&s) {
            Err(ScheduleError::NonMonotone { from, to }) => assert!(from < to),
            other => panic!("expected monotonicity error, got {other:?}"),
        }
        // γ ≤ 0 somewhere in the interior
        assert!(s.gamma(0.5) < 0.0);
    }

    #[test]
    fn power_with_unit_exponents_is_linear_linear() {
        let p = Schedule::power(1.0, 1.0).unwrap();
        let ll = Schedule::linear_linear();
        for &t in &[0.2, 0.5, 0.7] {
            assert!((p.g_follmer(t) - ll.g_follmer(t)).abs() < 1e-14);
        }
    }

    #[test]
    fn spec_round_trip_through_toml_names() {
        let spec: ScheduleSpec = serde_json::from_str(r#"{"name":"linear-sqrt"}"#).unwrap();
        assert_eq!(spec, ScheduleSpec::LinearSqrt);
        let p: ScheduleSpec =
            serde_json::from_str(r#"{"name":"power","beta_power":3.0,"sigma_power":2.0}"#).unwrap();
        assert!(matches!(p, ScheduleSpec::Power { .. }));
    }
}
