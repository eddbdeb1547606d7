//! Path simulation.
//!
//! Every path owns a ChaCha8 stream seeded by [`derive_path_seed`] from the
//! base seed and its index, and the integrators sweep time step by step with
//! the paths of one step processed in parallel. The drift is frozen once per
//! step, so per-path work is a single `eval_into` plus one Gaussian draw per
//! coordinate. Output never depends on the number of worker threads.
//!
//! The binary ensemble layout written by [`PathEnsemble::write_binary`] is,
//! all integers little-endian:
//!
//! ```text
//! magic "PSENSEMB" | version u32 | dim u32 | path_count u64 | time_count u64
//! | seed u64 | drift descriptor (len u32, utf-8) | g descriptor (len u32, utf-8)
//! | times f64[time_count] | paths f64[path_count * time_count * dim]
//! ```

mod ensemble;
pub mod seed;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::drift::{DiffusionCoefficient, DriftError, DriftField, FrozenDrift};
use crate::quadrature::{integrate, GaussLegendre, QuadratureError, Tolerance};
use crate::{ScalarFn, StreamRng};

pub use ensemble::{PathEnsemble, ENSEMBLE_MAGIC, ENSEMBLE_VERSION};
pub use seed::{derive_path_seed, derive_task_seed, splitmix64};

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("invalid integrator configuration: {0}")]
    Config(String),
    #[error("simulation diverged: path {path} became non-finite at t = {t}")]
    Divergence { path: usize, t: f64 },
    #[error("non-finite coefficient {what} at t = {t}")]
    NonFiniteCoefficient { what: &'static str, t: f64 },
    #[error("singular exponent p must be positive, got {0}")]
    Exponent(f64),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("ensemble i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed ensemble file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    EulerMaruyama,
    SingularIntegratingFactor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    #[default]
    Uniform,
    /// `t_k = t_start + (t_end − t_start) sin(πk / 2N)`, denser near `t_end`.
    Cosine,
}

fn default_steps() -> usize {
    1000
}
fn default_t_end() -> f64 {
    1.0
}
fn default_clip() -> f64 {
    1e-3
}
fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_steps")]
    pub step_count: usize,
    #[serde(default)]
    pub t_start: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    /// Width of the final window that is skipped by a single completion step.
    #[serde(default = "default_clip")]
    pub terminal_clip: f64,
    pub seed: u64,
    #[serde(default)]
    pub grid: GridKind,
    /// Keep every `record_stride`-th grid point (the endpoints are always kept).
    #[serde(default = "default_stride")]
    pub record_stride: usize,
}

impl IntegratorConfig {
    pub fn new(step_count: usize, seed: u64) -> Self {
        Self {
            scheme: Scheme::EulerMaruyama,
            step_count,
            t_start: 0.0,
            t_end: 1.0,
            terminal_clip: default_clip(),
            seed,
            grid: GridKind::Uniform,
            record_stride: 1,
        }
    }

    pub fn with_window(mut self, t_start: f64, t_end: f64) -> Self {
        self.t_start = t_start;
        self.t_end = t_end;
        self
    }

    pub fn with_clip(mut self, delta: f64) -> Self {
        self.terminal_clip = delta;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride;
        self
    }

    pub fn with_grid(mut self, grid: GridKind) -> Self {
        self.grid = grid;
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn validate(&self) -> Result<(), SdeError> {
        let bad = |m: String| Err(SdeError::Config(m));
        if self.step_count < 2 {
            return bad(format!("step_count must be at least 2, got {}", self.step_count));
        }
        if !(self.t_start >= 0.0 && self.t_start < self.t_end && self.t_end <= 1.0) {
            return bad(format!(
                "need 0 <= t_start < t_end <= 1, got [{}, {}]",
                self.t_start, self.t_end
            ));
        }
        if !(self.terminal_clip >= 0.0 && self.terminal_clip < self.t_end - self.t_start) {
            return bad(format!("terminal_clip {} is out of range", self.terminal_clip));
        }
        if self.record_stride == 0 {
            return bad("record_stride must be at least 1".into());
        }
        Ok(())
    }

    /// The full step grid, `step_count + 1` points from `t_start` to `t_end`.
    pub fn grid_points(&self) -> Vec<f64> {
        let n = self.step_count;
        let span = self.t_end - self.t_start;
        let mut g: Vec<f64> = (0..=n)
            .map(|k| match self.grid {
                GridKind::Uniform => self.t_start + span * k as f64 / n as f64,
                GridKind::Cosine => {
                    self.t_start + span * (std::f64::consts::FRAC_PI_2 * k as f64 / n as f64).sin()
                }
            })
            .collect();
        g[n] = self.t_end;
        g
    }

    /// Grid actually visited: steps up to `1 − δ`, then one completion step
    /// to `t_end`. Returns the visited times and whether the last step is a
    /// completion step.
    fn plan(&self) -> (Vec<f64>, bool) {
        let mut grid = self.grid_points();
        let clipping = self.terminal_clip > 0.0 && self.t_end >= 1.0;
        if !clipping {
            return (grid, false);
        }
        let cut = self.t_end - self.terminal_clip;
        let keep = grid.iter().take_while(|&&t| t <= cut + 1e-12).count().max(1);
        grid.truncate(keep);
        grid.push(self.t_end);
        (grid, true)
    }
}

/// Which grid indices are written to the ensemble.
fn recorded(len: usize, stride: usize) -> Vec<bool> {
    (0..len).map(|k| k % stride == 0 || k + 1 == len).collect()
}

type Buf = SmallVec<[f64; 8]>;

/// Shared stepping loop. `step(k, states, rngs)` advances every path from
/// grid index `k` to `k + 1`.
struct Runner {
    times: Vec<f64>,
    dim: usize,
    path_count: usize,
    keep: Vec<bool>,
    kept: usize,
    paths: Vec<f64>,
    states: Vec<f64>,
    rngs: Vec<StreamRng>,
    seed: u64,
}

impl Runner {
    fn new<I>(times: Vec<f64>, dim: usize, path_count: usize, cfg: &IntegratorConfig, init: I) -> Self
    where
        I: Fn(usize, &mut StreamRng, &mut [f64]) + Sync,
    {
        let keep = recorded(times.len(), cfg.record_stride);
        let kept = keep.iter().filter(|&&k| k).count();
        let mut rngs: Vec<StreamRng> = (0..path_count)
            .into_par_iter()
            .map(|i| StreamRng::seed_from_u64(derive_path_seed(cfg.seed, i as u64)))
            .collect();
        let mut states = vec![0.0; path_count * dim];
        states
            .par_chunks_mut(dim.max(1))
            .zip(rngs.par_iter_mut())
            .enumerate()
            .for_each(|(i, (x, rng))| init(i, rng, x));
        let mut r = Self {
            times,
            dim,
            path_count,
            keep,
            kept,
            paths: vec![0.0; path_count * kept * dim],
            states,
            rngs,
            seed: cfg.seed,
        };
        r.record(0, 0);
        r
    }

    fn record(&mut self, k: usize, slot: usize) {
        let (d, kept) = (self.dim, self.kept);
        if d == 0 {
            return;
        }
        self.paths
            .par_chunks_mut(kept * d)
            .zip(self.states.par_chunks(d))
            .for_each(|(row, x)| row[slot * d..(slot + 1) * d].copy_from_slice(x));
        let _ = k;
    }

    fn check(&self, t: f64) -> Result<(), SdeError> {
        if self.dim == 0 {
            return Ok(());
        }
        match self
            .states
            .par_chunks(self.dim)
            .position_first(|x| x.iter().any(|v| !v.is_finite()))
        {
            Some(path) => Err(SdeError::Divergence { path, t }),
            None => Ok(()),
        }
    }

    fn run<F>(mut self, mut step: F, drift: String, g: String) -> Result<PathEnsemble, SdeError>
    where
        F: FnMut(usize, &mut [f64], &mut [StreamRng]) -> Result<(), SdeError>,
    {
        let mut slot = 0;
        for k in 0..self.times.len() - 1 {
            step(k, &mut self.states, &mut self.rngs)?;
            self.check(self.times[k + 1])?;
            if self.keep[k + 1] {
                slot += 1;
                self.record(k + 1, slot);
            }
        }
        let times = self
            .times
            .iter()
            .zip(&self.keep)
            .filter(|(_, &k)| k)
            .map(|(&t, _)| t)
            .collect();
        Ok(PathEnsemble {
            times,
            dim: self.dim,
            path_count: self.path_count,
            paths: self.paths,
            seed: self.seed,
            drift_descriptor: drift,
            g_descriptor: g,
        })
    }
}

fn finite_coefficient(what: &'static str, t: f64, v: f64) -> Result<f64, SdeError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(SdeError::NonFiniteCoefficient { what, t })
    }
}

/// One Euler–Maruyama step for every path with a frozen drift.
fn euler_step(frozen: &dyn FrozenDrift, g: f64, dt: f64, dim: usize, states: &mut [f64], rngs: &mut [StreamRng]) {
    let noise = g * dt.sqrt();
    states
        .par_chunks_mut(dim)
        .zip(rngs.par_iter_mut())
        .for_each(|(x, rng)| {
            let mut b: Buf = SmallVec::from_elem(0.0, dim);
            frozen.eval_into(x, &mut b);
            for j in 0..dim {
                let xi: f64 = rng.sample(StandardNormal);
                x[j] += b[j] * dt + noise * xi;
            }
        });
}

/// Terminal completion: draws from the exact conditional law when the
/// drift offers one, otherwise takes `fallback`.
fn completion<F>(frozen: &dyn FrozenDrift, dim: usize, states: &mut [f64], rngs: &mut [StreamRng], fallback: F)
where
    F: Fn(&mut [f64], &mut StreamRng) + Sync,
{
    states
        .par_chunks_mut(dim)
        .zip(rngs.par_iter_mut())
        .for_each(|(x, rng)| {
            let mut out: Buf = SmallVec::from_elem(0.0, dim);
            if frozen.terminal_draw(x, rng, &mut out) {
                x.copy_from_slice(&out);
            } else {
                fallback(x, rng);
            }
        });
}

/// Euler–Maruyama from the point source `X_{t_start} = 0`.
pub fn simulate(
    drift: &dyn DriftField,
    g: &DiffusionCoefficient,
    cfg: &IntegratorConfig,
    path_count: usize,
) -> Result<PathEnsemble, SdeError> {
    simulate_from(drift, g, cfg, path_count, |_, _, x| x.fill(0.0))
}

/// Euler–Maruyama with a caller-supplied initial state. `init(i, rng, x)`
/// receives path `i`'s own stream before any increment is drawn.
pub fn simulate_from<I>(
    drift: &dyn DriftField,
    g: &DiffusionCoefficient,
    cfg: &IntegratorConfig,
    path_count: usize,
    init: I,
) -> Result<PathEnsemble, SdeError>
where
    I: Fn(usize, &mut StreamRng, &mut [f64]) + Sync,
{
    cfg.validate()?;
    if cfg.scheme != Scheme::EulerMaruyama {
        return Err(SdeError::Config("simulate requires scheme = euler_maruyama".into()));
    }
    let dim = drift.dim();
    let (times, completes) = cfg.plan();
    let last = times.len() - 2;
    let grid = times.clone();
    let runner = Runner::new(times, dim, path_count, cfg, init);
    runner.run(
        |k, states, rngs| {
            let (t, next) = (grid[k], grid[k + 1]);
            let dt = next - t;
            let frozen = drift.freeze(t)?;
            let gt = finite_coefficient("g", t, g.eval(t))?;
            if completes && k == last {
                let noise = gt * dt.sqrt();
                completion(frozen.as_ref(), dim, states, rngs, |x, rng| {
                    let mut b: Buf = SmallVec::from_elem(0.0, dim);
                    frozen.eval_into(x, &mut b);
                    for j in 0..dim {
                        let xi: f64 = rng.sample(StandardNormal);
                        x[j] += b[j] * dt + noise * xi;
                    }
                });
            } else {
                euler_step(frozen.as_ref(), gt, dt, dim, states, rngs);
            }
            Ok(())
        },
        drift.descriptor(),
        g.descriptor().to_string(),
    )
}

/// Integrator for `dX = [b_t(X) − p (X − x0)/t] dt + g_t dW` from `X_0 = x0`,
/// where `b` is the regular part of the drift.
///
/// The state is carried through `Y_s = s^p (X_s − x0)`, which solves the
/// singularity-free equation `dY = s^p b_s(X_s) ds + s^p g_s dW`. The first
/// step from the origin uses `X = x0` inside the integrals, evaluated with a
/// 64-point Gauss–Legendre rule; later steps are Euler steps for `Y` with the
/// weights `∫ u^p du` and `∫ u^{2p} du` computed exactly.
pub fn simulate_singular(
    p: f64,
    x0: &[f64],
    b: &dyn DriftField,
    g: &DiffusionCoefficient,
    cfg: &IntegratorConfig,
    path_count: usize,
) -> Result<PathEnsemble, SdeError> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(SdeError::Exponent(p));
    }
    cfg.validate()?;
    if cfg.t_start != 0.0 {
        return Err(SdeError::Config("the singular scheme starts at t = 0".into()));
    }
    let dim = b.dim();
    if x0.len() != dim {
        return Err(DriftError::DimensionMismatch { expected: dim, got: x0.len() }.into());
    }
    let (times, completes) = cfg.plan();
    let s1 = times[1];

    let gl = GaussLegendre::new(64);
    let mut mean1 = vec![0.0; dim];
    let mut var1 = 0.0;
    let mut out = vec![0.0; dim];
    for (u, w) in gl.mapped(0.0, s1) {
        let up = u.powf(p);
        b.freeze(u)?.eval_into(x0, &mut out);
        for j in 0..dim {
            mean1[j] += w * up * out[j];
        }
        let gu = finite_coefficient("g", u, g.eval(u))?;
        var1 += w * up * up * gu * gu;
    }
    let inv1 = s1.powf(-p);
    for (j, m) in mean1.iter_mut().enumerate() {
        *m = x0[j] + inv1 * *m;
    }
    let sd1 = inv1 * var1.sqrt();

    let last = times.len() - 2;
    let grid = times.clone();
    let runner = Runner::new(times, dim, path_count, cfg, |_, _, x: &mut [f64]| x.copy_from_slice(x0));
    runner.run(
        |k, states, rngs| {
            if k == 0 {
                states
                    .par_chunks_mut(dim)
                    .zip(rngs.par_iter_mut())
                    .for_each(|(x, rng)| {
                        for j in 0..dim {
                            let xi: f64 = rng.sample(StandardNormal);
                            x[j] = mean1[j] + sd1 * xi;
                        }
                    });
                return Ok(());
            }
            let (s, next) = (grid[k], grid[k + 1]);
            let w1 = (next.powf(p + 1.0) - s.powf(p + 1.0)) / (p + 1.0);
            let w2 = (next.powf(2.0 * p + 1.0) - s.powf(2.0 * p + 1.0)) / (2.0 * p + 1.0);
            let inv = next.powf(-p);
            let decay = (s / next).powf(p);
            let gt = finite_coefficient("g", s, g.eval(s))?;
            let noise = gt * w2.sqrt() * inv;
            let frozen = b.freeze(s)?;
            let advance = |x: &mut [f64], rng: &mut StreamRng| {
                let mut bx: Buf = SmallVec::from_elem(0.0, dim);
                frozen.eval_into(x, &mut bx);
                for j in 0..dim {
                    let xi: f64 = rng.sample(StandardNormal);
                    x[j] = x0[j] + decay * (x[j] - x0[j]) + inv * w1 * bx[j] + noise * xi;
                }
            };
            if completes && k == last {
                completion(frozen.as_ref(), dim, states, rngs, advance);
            } else {
                states
                    .par_chunks_mut(dim)
                    .zip(rngs.par_iter_mut())
                    .for_each(|(x, rng)| advance(x, rng));
            }
            Ok(())
        },
        format!("singular(p={p},{})", b.descriptor()),
        g.descriptor().to_string(),
    )
}

fn quad_tol() -> Tolerance {
    Tolerance::new(1e-13, 1e-11).with_max_intervals(2000)
}

/// Accepts a non-converged estimate; used where the integrand may be
/// singular at the origin and the result only feeds Monte Carlo draws.
fn loose(f: impl FnMut(f64) -> f64, a: f64, b: f64) -> Result<f64, SdeError> {
    match integrate(f, a, b, quad_tol()) {
        Ok(r) => Ok(r.value),
        Err(QuadratureError::NotConverged { estimate, .. }) => Ok(estimate),
        Err(e) => Err(e.into()),
    }
}

/// Exact-in-law transition `Y_{t'} = m Y_t + √v ξ` of the linear SDE over `span`.
fn linear_transition(a: &ScalarFn, g: &ScalarFn, span: Range<f64>) -> Result<(f64, f64), SdeError> {
    let (t0, t1) = (span.start, span.end);
    let log_factor = loose(|u| a(u), t0, t1)?;
    let var = loose(
        |u| {
            let gu = g(u);
            if gu == 0.0 {
                return 0.0;
            }
            let inner = match integrate(|v| a(v), u, t1, quad_tol()) {
                Ok(r) => r.value,
                Err(QuadratureError::NotConverged { estimate, .. }) => estimate,
                Err(_) => return 0.0,
            };
            let w = (2.0 * inner).exp();
            if w.is_finite() {
                w * gu * gu
            } else {
                0.0
            }
        },
        t0,
        t1,
    )?;
    let m = log_factor.exp();
    let m = finite_coefficient("a", t0, m)?;
    let var = finite_coefficient("g", t0, var)?;
    Ok((m, var.max(0.0)))
}

/// Simulates the linear reference SDE `dY = a_t Y dt + g_t dW`, `Y_0 = 0`,
/// in `dim` independent coordinates using its exact Gaussian transitions.
/// The terminal clip does not apply.
pub fn simulate_reference(
    a: ScalarFn,
    g: ScalarFn,
    dim: usize,
    cfg: &IntegratorConfig,
    path_count: usize,
) -> Result<PathEnsemble, SdeError> {
    cfg.validate()?;
    let times = cfg.grid_points();
    let transitions: Vec<(f64, f64)> = (0..times.len() - 1)
        .into_par_iter()
        .map(|k| linear_transition(&a, &g, times[k]..times[k + 1]))
        .collect::<Result<_, _>>()?;
    let runner = Runner::new(times, dim, path_count, cfg, |_, _, x: &mut [f64]| x.fill(0.0));
    runner.run(
        |k, states, rngs| {
            let (m, v) = transitions[k];
            let sd = v.sqrt();
            states
                .par_chunks_mut(dim)
                .zip(rngs.par_iter_mut())
                .for_each(|(x, rng)| {
                    for xj in x.iter_mut() {
                        let xi: f64 = rng.sample(StandardNormal);
                        *xj = m * *xj + sd * xi;
                    }
                });
            Ok(())
        },
        "reference(exact)".into(),
        "reference-g".into(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{FnDrift, RegularPart, TunedDrift};
    use crate::schedule::Schedule;
    use crate::scalar_fn;
    use crate::target::GaussianMixtureTarget;
    use std::sync::Arc;

    fn var_at(e: &PathEnsemble, t: f64) -> (f64, f64) {
        let k = e.time_index(t);
        let v = e.covariance_at(k)[(0, 0)];
        (v, v * (2.0 / (e.path_count as f64 - 1.0)).sqrt())
    }

    #[test]
    fn config_validation() {
        assert!(IntegratorConfig::new(1, 0).validate().is_err());
        assert!(IntegratorConfig::new(10, 0).with_window(0.5, 0.2).validate().is_err());
        assert!(IntegratorConfig::new(10, 0).with_clip(-1.0).validate().is_err());
        assert!(IntegratorConfig::new(10, 0).with_stride(0).validate().is_err());
        assert!(IntegratorConfig::new(10, 0).validate().is_ok());
    }

    #[test]
    fn plan_and_recording() {
        let cfg = IntegratorConfig::new(2000, 1);
        let (times, completes) = cfg.plan();
        assert!(completes);
        assert_eq!(times.len(), 2000);
        assert!((times[times.len() - 2] - 0.999).abs() < 1e-12);
        let e = simulate(&FnDrift::zero(1), &DiffusionCoefficient::constant(1.0), &cfg.clone().with_stride(500), 4)
            .unwrap();
        assert_eq!(e.times, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let cosine = IntegratorConfig::new(8, 0).with_grid(GridKind::Cosine).grid_points();
        assert!(cosine.windows(2).all(|w| w[1] > w[0]));
        assert!(cosine[8] - cosine[7] < cosine[1] - cosine[0]);
    }

    #[test]
    fn brownian_motion() {
        let cfg = IntegratorConfig::new(100, 7).with_clip(0.0);
        let e = simulate(&FnDrift::zero(1), &DiffusionCoefficient::constant(1.0), &cfg, 20_000).unwrap();
        let (v, se) = var_at(&e, 1.0);
        assert!((v - 1.0).abs() < 3.0 * se, "{v}");
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let cfg = IntegratorConfig::new(50, 42);
        let d = FnDrift::linear(2, "x", scalar_fn(|t| -t));
        let g = DiffusionCoefficient::constant(0.7);
        let a = simulate(&d, &g, &cfg, 257).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| simulate(&d, &g, &cfg, 257).unwrap());
        assert_eq!(a, b);
        let c = simulate(&d, &g, &IntegratorConfig::new(50, 43), 257).unwrap();
        assert_ne!(a.paths, c.paths);
    }

    #[test]
    fn divergence_is_reported() {
        let d = FnDrift::new(1, "blowup", |_, x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0] * 1e200 + 1e300);
        let err = simulate(&d, &DiffusionCoefficient::constant(1.0), &IntegratorConfig::new(10, 1), 3).unwrap_err();
        assert!(matches!(err, SdeError::Divergence { path: 0, .. }), "{err}");
    }

    #[test]
    fn singular_driftless_variance() {
        let cfg = IntegratorConfig::new(200, 3).with_clip(0.0).with_scheme(Scheme::SingularIntegratingFactor);
        let e = simulate_singular(1.0, &[0.0], &FnDrift::zero(1), &DiffusionCoefficient::constant(1.0), &cfg, 40_000)
            .unwrap();
        let (v, se) = var_at(&e, 0.5);
        assert!((v - 1.0 / 6.0).abs() < 3.0 * se, "{v}");
        // Mean-square convergence to x0 at small times.
        let early = e.covariance_at(1)[(0, 0)];
        assert!(early < 0.01 / 3.0 * 1.5);
        assert!(matches!(
            simulate_singular(0.0, &[0.0], &FnDrift::zero(1), &DiffusionCoefficient::constant(1.0), &cfg, 1),
            Err(SdeError::Exponent(_))
        ));
    }

    #[test]
    fn singular_worked_example_preserves_terminal_law() {
        let s = Schedule::quadratic_linear();
        let eta = 0.5;
        let tg = Arc::new(GaussianMixtureTarget::scalar(&[(1.0, 0.0, 1.0)], eta).unwrap());
        let g = DiffusionCoefficient::from_fn("sqrt((1-t)(3-t))", scalar_fn(|t| ((1.0 - t) * (3.0 - t)).sqrt()));
        let tuned = TunedDrift::new(s.clone(), tg, g.clone()).unwrap();
        let reg = RegularPart::new(tuned, 1.0, vec![0.0]).unwrap();
        let cfg = IntegratorConfig::new(400, 11).with_scheme(Scheme::SingularIntegratingFactor);
        let e = simulate_singular(1.0, &[0.0], &reg, &g, &cfg, 20_000).unwrap();
        let n = e.path_count as f64;
        let want = 1.0 + eta * eta;
        let v = e.covariance_at(e.times.len() - 1)[(0, 0)];
        assert!((v - want).abs() < 3.0 * want * (2.0 / n).sqrt(), "{v} vs {want}");
        let mid = s.reference_variance(0.5) + 0.25 * 0.25 * eta * eta;
        let vm = e.covariance_at(e.time_index(0.5))[(0, 0)];
        assert!((vm - mid).abs() < 4.0 * mid * (2.0 / n).sqrt(), "{vm} vs {mid}");
    }

    #[test]
    fn reference_process_is_exact() {
        let cfg = IntegratorConfig::new(40, 5).with_clip(0.0);
        let bm = simulate_reference(scalar_fn(|_| 0.0), scalar_fn(|_| 1.0), 1, &cfg, 20_000).unwrap();
        let (v, se) = var_at(&bm, 0.5);
        assert!((v - 0.5).abs() < 3.0 * se);
        let s = Schedule::linear_linear();
        let e = simulate_reference(s.a_ref_fn(), s.follmer_g(), 1, &cfg, 20_000).unwrap();
        for &t in &[0.25, 0.5, 0.75, 1.0] {
            let (v, se) = var_at(&e, t);
            let want = s.reference_variance(t);
            assert!((v - want).abs() < 3.0 * se, "t={t}: {v} vs {want}");
        }
    }
}
