//! Drift fields `(t, x) ↦ b_t(x)` and diffusion coefficients.
//!
//! A [`DriftField`] is evaluated through [`DriftField::freeze`], which performs
//! all `t`-dependent work once (schedule coefficients, posterior
//! factorisations, knot interpolation) and returns a [`FrozenDrift`] that maps
//! states to drifts without allocating. Simulators freeze once per time step
//! and then sweep all paths.

mod lipschitz;
mod oracle;
mod regression;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::{FollmerScheduleData, Schedule, ScheduleError};
use crate::target::{Target, TargetError};
use crate::{scalar_fn, ScalarFn, StreamRng};

pub use lipschitz::{empirical_lipschitz, lipschitz_bound};
pub use oracle::{
    BaselineDrift, FollmerDrift, FollmerVariant, RegularPart, SpecialFollmerDrift, TunedDrift,
    TunedField,
    BASELINE_FORM_SWITCH,
};
pub use regression::{
    chebyshev_knots, fit_follmer_regression, fit_regression, BasisSpec, EstimatedDrift,
    EstimatorSpec, FeatureBasis, RegressionEstimator, TrainingMetadata, ESTIMATOR_FORMAT,
    ESTIMATOR_VERSION,
};

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("time {0} is outside the domain of this drift")]
    Domain(f64),
    #[error("diffusion coefficient fails the {limit} boundary limit: {detail}")]
    InvalidG { limit: &'static str, detail: String },
    #[error("bridge is degenerate at t = {0} (K_t must lie in (0, 1))")]
    Boundary(f64),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("terminal cutoff must be positive: the Föllmer regression target is singular at t = 1")]
    TerminalSingularity,
    #[error("rank-deficient design at knot t = {t} and ridge regularisation is disabled")]
    RankDeficient { t: f64 },
    #[error("Lipschitz bound unavailable: {0}")]
    BoundUnavailable(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("estimator document: {0}")]
    Format(String),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Baseline,
    Tuned,
    FollmerGeneric,
    FollmerSpecial,
    Estimated,
    Custom,
}

/// A drift with all time-dependent quantities fixed.
pub trait FrozenDrift: Send + Sync {
    fn eval_into(&self, x: &[f64], out: &mut [f64]);

    /// Draws `x★` from its conditional law given the current state, when the
    /// drift is backed by a posterior oracle. Returns `false` otherwise.
    fn terminal_draw(&self, _x: &[f64], _rng: &mut StreamRng, _out: &mut [f64]) -> bool {
        false
    }
}

pub trait DriftField: Send + Sync {
    fn dim(&self) -> usize;
    fn kind(&self) -> DriftKind;
    fn descriptor(&self) -> String;
    fn freeze(&self, t: f64) -> Result<Box<dyn FrozenDrift + '_>, DriftError>;

    /// Convenience single-point evaluation.
    fn eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, DriftError> {
        if x.len() != self.dim() {
            return Err(DriftError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let f = self.freeze(t)?;
        let mut out = vec![0.0; x.len()];
        f.eval_into(x, &mut out);
        Ok(out)
    }
}

impl<T: DriftField + ?Sized> DriftField for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn kind(&self) -> DriftKind {
        (**self).kind()
    }
    fn descriptor(&self) -> String {
        (**self).descriptor()
    }
    fn freeze(&self, t: f64) -> Result<Box<dyn FrozenDrift + '_>, DriftError> {
        (**self).freeze(t)
    }
}

impl<T: DriftField + ?Sized> DriftField for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn kind(&self) -> DriftKind {
        (**self).kind()
    }
    fn descriptor(&self) -> String {
        (**self).descriptor()
    }
    fn freeze(&self, t: f64) -> Result<Box<dyn FrozenDrift + '_>, DriftError> {
        (**self).freeze(t)
    }
}

/// A diffusion coefficient `g_t` with a printable provenance string.
#[derive(Clone)]
pub struct DiffusionCoefficient {
    descriptor: String,
    f: ScalarFn,
}

impl fmt::Debug for DiffusionCoefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DiffusionCoefficient({})", self.descriptor)
    }
}

impl DiffusionCoefficient {
    /// `g = σ`, sharing the schedule's own σ so that `g² − σ²` is exactly 0.
    pub fn baseline(s: &Schedule) -> Self {
        Self {
            descriptor: format!("baseline({})", s.name),
            f: s.sigma_fn(),
        }
    }

    /// The KL-optimal coefficient `g^F` of the schedule.
    pub fn follmer(s: &Schedule) -> Self {
        Self {
            descriptor: format!("follmer({})", s.name),
            f: s.follmer_g(),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self {
            descriptor: format!("constant({c})"),
            f: scalar_fn(move |_| c),
        }
    }

    /// Piecewise-linear interpolation of `(times, values)`, held constant
    /// outside the table.
    pub fn table(times: Vec<f64>, values: Vec<f64>) -> Result<Self, DriftError> {
        if times.len() != values.len() || times.len() < 2 {
            return Err(DriftError::Precondition(
                "g table needs at least two (t, g) pairs of equal length".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(DriftError::Precondition(
                "g table times must be strictly increasing".into(),
            ));
        }
        let descriptor = format!("table({} points)", times.len());
        Ok(Self {
            descriptor,
            f: scalar_fn(move |t| interpolate(&times, &values, t)),
        })
    }

    pub fn from_fn(descriptor: impl Into<String>, f: ScalarFn) -> Self {
        Self {
            descriptor: descriptor.into(),
            f,
        }
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        (self.f)(t)
    }

    pub fn function(&self) -> ScalarFn {
        self.f.clone()
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }
}

/// Piecewise-linear interpolation, constant beyond the end points.
pub(crate) fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let n = xs.len();
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let i = xs.partition_point(|v| *v <= x);
    let (x0, x1) = (xs[i - 1], xs[i]);
    let w = (x - x0) / (x1 - x0);
    ys[i - 1] + w * (ys[i] - ys[i - 1])
}

/// Diffusion-coefficient choice in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GSpec {
    Baseline,
    Follmer,
    Constant { value: f64 },
    Table { times: Vec<f64>, values: Vec<f64> },
}

impl GSpec {
    pub fn build(&self, s: &Schedule) -> Result<DiffusionCoefficient, DriftError> {
        match self {
            GSpec::Baseline => Ok(DiffusionCoefficient::baseline(s)),
            GSpec::Follmer => Ok(DiffusionCoefficient::follmer(s)),
            GSpec::Constant { value } => Ok(DiffusionCoefficient::constant(*value)),
            GSpec::Table { times, values } => {
                DiffusionCoefficient::table(times.clone(), values.clone())
            }
        }
    }
}

/// `(t, x, out)` evaluation of a closure drift.
type PointFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// A drift given by a closure, for reference processes and tests.
#[derive(Clone)]
pub struct FnDrift {
    dim: usize,
    descriptor: String,
    f: Arc<PointFn>,
}

impl FnDrift {
    pub fn new<F>(dim: usize, descriptor: impl Into<String>, f: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            dim,
            descriptor: descriptor.into(),
            f: Arc::new(f),
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(dim, "zero", |_, _, out| out.fill(0.0))
    }

    /// `b_t(x) = c(t) x`.
    pub fn linear(dim: usize, descriptor: impl Into<String>, c: ScalarFn) -> Self {
        Self::new(dim, descriptor, move |t, x, out| {
            let k = c(t);
            for (o, xi) in out.iter_mut().zip(x) {
                *o = k * xi;
            }
        })
    }
}

struct FrozenFn<'a> {
    t: f64,
    f: &'a PointFn,
}

impl FrozenDrift for FrozenFn<'_> {
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(self.t, x, out)
    }
}

impl DriftField for FnDrift {
    fn dim(&self) -> usize {
        self.dim
    }
    fn kind(&self) -> DriftKind {
        DriftKind::Custom
    }
    fn descriptor(&self) -> String {
        self.descriptor.clone()
    }
    fn freeze(&self, t: f64) -> Result<Box<dyn FrozenDrift + '_>, DriftError> {
        Ok(Box::new(FrozenFn { t, f: &*self.f }))
    }
}

/// `b_t(x)` from the baseline construction.
pub fn baseline_drift(
    s: &Schedule,
    target: Arc<dyn Target>,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>, DriftError> {
    BaselineDrift::new(s.clone(), target).eval(t, x)
}

/// `∇ log ρ_t(x) = A_t (β_t b_t(x) − β̇_t x)`.
pub fn score_field(
    s: &Schedule,
    target: Arc<dyn Target>,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>, DriftError> {
    if !(t > 0.0 && t < 1.0) {
        return Err(DriftError::Domain(t));
    }
    let b = baseline_drift(s, target, t, x)?;
    let (a, beta, bd) = (s.big_a(t), s.beta(t), s.beta_dot(t));
    Ok(b.iter()
        .zip(x)
        .map(|(bi, xi)| a * (beta * bi - bd * xi))
        .collect())
}

/// `b^g_t(x)`, the drift that keeps the interpolant's marginals when the
/// diffusion coefficient is `g`.
pub fn tuned_drift(
    s: &Schedule,
    target: Arc<dyn Target>,
    g: DiffusionCoefficient,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>, DriftError> {
    TunedDrift::new(s.clone(), target, g)?.eval(t, x)
}

/// Föllmer drift for reference drift rate `a` and coefficient `g`.
pub fn follmer_drift_generic(
    fsd: Arc<FollmerScheduleData>,
    target: Arc<dyn Target>,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>, DriftError> {
    FollmerDrift::new(fsd, target).eval(t, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_interpolates_and_clamps() {
        let g = DiffusionCoefficient::table(vec![0.0, 0.5, 1.0], vec![1.0, 2.0, 0.0]).unwrap();
        assert_eq!(g.eval(0.25), 1.5);
        assert_eq!(g.eval(0.75), 1.0);
        assert_eq!(g.eval(-1.0), 1.0);
        assert_eq!(g.eval(2.0), 0.0);
        assert!(DiffusionCoefficient::table(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn g_spec_parses() {
        let g: GSpec = serde_json::from_str(r#"{"kind":"constant","value":1.5}"#).unwrap();
        assert_eq!(g, GSpec::Constant { value: 1.5 });
    }
}
