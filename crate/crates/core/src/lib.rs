//! Point-source generative diffusions built from stochastic interpolants.
//!
//! A schedule `(β_t, σ_t)` defines the interpolant `x_t = β_t x★ + √t σ_t z`
//! between a point mass at the origin (`t = 0`) and a target law μ★ (`t = 1`).
//! This crate provides:
//!
//! * [`schedule`]: schedules, their derived coefficients (including the
//!   KL-optimal diffusion coefficient `g^F` and the reference drift `a_t`), and
//!   the integrating-factor data of the associated linear reference process.
//! * [`target`]: target distributions with closed-form (Gaussian mixture) or
//!   quadrature-backed (1-d) posterior and score oracles.
//! * [`drift`]: baseline, tuned and Föllmer drift fields plus per-knot least
//!   squares drift estimators.
//! * [`sde`]: Euler–Maruyama simulation, exact reference-process simulation
//!   and an integrator for drifts with a `-p (x - x0)/t` singularity at `t = 0`.
//! * [`analysis`]: path-space KL, the schedule-invariant KL★, identity checks
//!   and energy-distance two-sample tests.

use std::sync::Arc;

pub mod analysis;
pub mod drift;
pub mod quadrature;
pub mod schedule;
pub mod sde;
pub mod target;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Per-stream random generator used for every draw in the crate.
pub type StreamRng = rand_chacha::ChaCha8Rng;

/// A shareable scalar function of time.
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Wraps a closure as a [`ScalarFn`].
pub fn scalar_fn<F>(f: F) -> ScalarFn
where
    F: Fn(f64) -> f64 + Send + Sync + 'static,
{
    Arc::new(f)
}

pub use analysis::{KlReport, ScoreErrorModel};
pub use drift::{DiffusionCoefficient, DriftField, DriftKind, FrozenDrift, RegressionEstimator};
pub use schedule::{FollmerScheduleData, Schedule, ScheduleCoefficients, ScheduleSpec};
pub use target::{GaussianMixtureTarget, Posterior, QuadratureTarget1D, Target};
pub use sde::{IntegratorConfig, PathEnsemble};
