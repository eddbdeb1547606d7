//! Per-knot least-squares drift estimation.
//!
//! At each knot `t_k` fresh pairs `(x★, z)` are drawn, the interpolant state and
//! its regression target are formed, and the basis coefficients are fitted by
//! ordinary least squares through a Householder QR factorisation. Between
//! knots the coefficients are interpolated linearly; outside the knot range
//! they are held at the nearest knot.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SVD};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use super::oracle::BaselineDrift;
use super::{interpolate, DiffusionCoefficient, DriftError, DriftField, DriftKind, FrozenDrift};
use crate::schedule::{FollmerScheduleData, Schedule};
use crate::sde::derive_task_seed;
use crate::target::Target;
use crate::{ScalarFn, StreamRng};

pub const ESTIMATOR_FORMAT: &str = "follmer-regression-estimator";
pub const ESTIMATOR_VERSION: u32 = 1;

/// Smallest admissible radial bandwidth.
const MIN_BANDWIDTH: f64 = 1e-2;
const RIDGE: f64 = 1e-10;
/// Relative size of the smallest `R` diagonal entry below which the design is
/// treated as rank deficient.
const RANK_TOL: f64 = 1e-10;
const MIN_SAMPLES_PER_FEATURE: usize = 10;

/// Feature map `x ↦ φ(x)`. Every basis includes a constant and the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FeatureBasis {
    Affine,
    /// Coordinate-wise powers `x_i^k`, `k ≤ degree`, without cross terms.
    Polynomial { degree: usize },
    /// Affine part plus Gaussian bumps `exp(−|x − c|² / (2h²))`.
    Radial {
        centers: Vec<Vec<f64>>,
        bandwidth: f64,
    },
}

pub type BasisSpec = FeatureBasis;

impl FeatureBasis {
    fn degree(&self) -> usize {
        match self {
            FeatureBasis::Polynomial { degree } => *degree,
            _ => 1,
        }
    }

    /// Clamps radial bandwidths from below so that every fitted field is
    /// globally Lipschitz with an explicit constant.
    pub fn sanitized(&self) -> Self {
        match self {
            FeatureBasis::Radial { centers, bandwidth } => FeatureBasis::Radial {
                centers: centers.clone(),
                bandwidth: bandwidth.max(MIN_BANDWIDTH),
            },
            other => other.clone(),
        }
    }

    pub fn len(&self, dim: usize) -> usize {
        let poly = 1 + dim * self.degree();
        match self {
            FeatureBasis::Radial { centers, .. } => poly + centers.len(),
            _ => poly,
        }
    }

    pub fn is_empty(&self, dim: usize) -> bool {
        self.len(dim) == 0
    }

    fn validate(&self, dim: usize) -> Result<(), DriftError> {
        match self {
            FeatureBasis::Polynomial { degree } if *degree == 0 => Err(DriftError::Precondition(
                "polynomial degree must be at least 1".into(),
            )),
            FeatureBasis::Radial { centers, bandwidth } => {
                if !(bandwidth.is_finite() && *bandwidth > 0.0) {
                    return Err(DriftError::Precondition(format!(
                        "radial bandwidth must be positive, got {bandwidth}"
                    )));
                }
                if let Some(c) = centers.iter().find(|c| c.len() != dim) {
                    return Err(DriftError::DimensionMismatch {
                        expected: dim,
                        got: c.len(),
                    });
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn features_into(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        out[0] = 1.0;
        let deg = self.degree();
        let mut idx = 1;
        for i in 0..d {
            let mut p = x[i];
            out[idx] = p;
            idx += 1;
            for _ in 1..deg {
                p *= x[i];
                out[idx] = p;
                idx += 1;
            }
        }
        if let FeatureBasis::Radial { centers, bandwidth } = self {
            let inv = 1.0 / (2.0 * bandwidth * bandwidth);
            for c in centers {
                let mut r2 = 0.0;
                for i in 0..d {
                    let diff = x[i] - c[i];
                    r2 += diff * diff;
                }
                out[idx] = (-r2 * inv).exp();
                idx += 1;
            }
        }
    }

    /// Global Lipschitz constant in `x` of `x ↦ Wᵀ φ(x)` for a coefficient
    /// block `W` (`features × dim`, row-major). Polynomials of degree ≥ 2 are
    /// not globally Lipschitz, so `None` is returned for them.
    pub fn lipschitz(&self, coef: &[f64], dim: usize) -> Option<f64> {
        if self.degree() > 1 {
            return None;
        }
        // Rows 1..=dim hold the linear block.
        let lin = DMatrix::from_fn(dim, dim, |i, j| coef[(1 + i) * dim + j]);
        let mut bound = lin.singular_values().max();
        if let FeatureBasis::Radial { centers, bandwidth } = self {
            // |∇ exp(−r²/2h²)| ≤ e^{−1/2} / h.
            let peak = (-0.5f64).exp() / bandwidth;
            for k in 0..centers.len() {
                let row = 1 + dim + k;
                let w: f64 = coef[row * dim..(row + 1) * dim]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                bound += w * peak;
            }
        }
        Some(bound)
    }
}

fn default_knots() -> usize {
    64
}
fn default_t_min() -> f64 {
    1e-3
}
fn default_t_max() -> f64 {
    1.0 - 1e-3
}
fn default_true() -> bool {
    true
}
fn default_cutoff() -> f64 {
    1e-3
}

/// Estimator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub basis: FeatureBasis,
    #[serde(default = "default_knots")]
    pub knots: usize,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    /// Fall back to a ridge solve on rank-deficient designs instead of failing.
    #[serde(default = "default_true")]
    pub allow_ridge: bool,
    /// Distance `δ_F` from `t = 1` at which Föllmer regressions stop.
    #[serde(default = "default_cutoff")]
    pub terminal_cutoff: f64,
}

impl EstimatorSpec {
    pub fn new(basis: FeatureBasis) -> Self {
        Self {
            basis,
            knots: default_knots(),
            t_min: default_t_min(),
            t_max: default_t_max(),
            allow_ridge: true,
            terminal_cutoff: default_cutoff(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    /// `interpolant` or `follmer-control`.
    pub objective: String,
    pub seed: u64,
    pub sample_count: usize,
    /// In-sample mean squared residual at each knot.
    pub knot_loss: Vec<f64>,
    /// Mean squared deviation of the regression target from its conditional
    /// expectation at each knot (the irreducible part of the loss).
    pub knot_floor: Vec<f64>,
    /// Trapezoidal integral of `knot_loss` over the knot range.
    pub final_loss: f64,
    /// Trapezoidal integral of `knot_floor` over the knot range.
    pub variance_floor: f64,
    pub rank_deficient: bool,
    pub rank_deficient_knots: Vec<usize>,
    pub descriptor: String,
}

/// A fitted drift: knots, per-knot coefficients and training metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionEstimator {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub basis: FeatureBasis,
    pub knots: Vec<f64>,
    /// One `features × dim` row-major block per knot.
    pub coefficients: Vec<Vec<f64>>,
    pub metadata: TrainingMetadata,
}

/// Chebyshev–Lobatto points on `[a, b]`, increasing.
pub fn chebyshev_knots(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    (0..n)
        .map(|k| {
            let c = (std::f64::consts::PI * k as f64 / (n - 1) as f64).cos();
            0.5 * (a + b) - 0.5 * (b - a) * c
        })
        .collect()
}

impl RegressionEstimator {
    pub fn feature_count(&self) -> usize {
        self.basis.len(self.dim)
    }

    /// Coefficient block interpolated to time `t`.
    pub fn coefficients_at(&self, t: f64) -> Vec<f64> {
        let n = self.knots.len();
        if t <= self.knots[0] {
            return self.coefficients[0].clone();
        }
        if t >= self.knots[n - 1] {
            return self.coefficients[n - 1].clone();
        }
        let i = self.knots.partition_point(|k| *k <= t);
        let (t0, t1) = (self.knots[i - 1], self.knots[i]);
        let w = (t - t0) / (t1 - t0);
        self.coefficients[i - 1]
            .iter()
            .zip(&self.coefficients[i])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let coef = self.coefficients_at(t);
        apply(&self.basis, &coef, self.dim, x, out);
    }

    /// Lipschitz constant of the fitted field at every knot.
    pub fn lipschitz_bounds(&self) -> Vec<Option<f64>> {
        self.coefficients
            .iter()
            .map(|c| self.basis.lipschitz(c, self.dim))
            .collect()
    }

    /// Linear interpolation of a per-knot quantity.
    pub fn interpolate_knots(&self, values: &[f64], t: f64) -> f64 {
        interpolate(&self.knots, values, t)
    }

    pub fn to_json(&self) -> Result<String, DriftError> {
        serde_json::to_string_pretty(self).map_err(|e| DriftError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, DriftError> {
        let est: Self =
            serde_json::from_str(text).map_err(|e| DriftError::Format(e.to_string()))?;
        if est.format != ESTIMATOR_FORMAT {
            return Err(DriftError::Format(format!("unexpected format `{}`", est.format)));
        }
        if est.version != ESTIMATOR_VERSION {
            return Err(DriftError::Format(format!(
                "unsupported version {} (expected {ESTIMATOR_VERSION})",
                est.version
            )));
        }
        let p = est.feature_count() * est.dim;
        if est.knots.is_empty()
            || est.knots.len() != est.coefficients.len()
            || est.coefficients.iter().any(|c| c.len() != p)
        {
            return Err(DriftError::Format("knot and coefficient shapes disagree".into()));
        }
        if est.knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(DriftError::Format("knots must be strictly increasing".into()));
        }
        if est.coefficients.iter().flatten().any(|c| !c.is_finite()) {
            return Err(DriftError::Format("non-finite coefficient".into()));
        }
        Ok(est)
    }

    pub fn save(&self, path: &Path) -> Result<(), DriftError> {
        std::fs::write(path, self.to_json()?).map_err(|e| DriftError::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DriftError> {
        let text = std::fs::read_to_string(path).map_err(|e| DriftError::Format(e.to_string()))?;
        Self::from_json(&text)
    }
}

#[inline]
fn apply(basis: &FeatureBasis, coef: &[f64], dim: usize, x: &[f64], out: &mut [f64]) {
    let p = basis.len(dim);
    let mut phi: SmallVec<[f64; 16]> = SmallVec::from_elem(0.0, p);
    basis.features_into(x, &mut phi);
    out[..dim].fill(0.0);
    for (f, v) in phi.iter().enumerate() {
        let row = &coef[f * dim..(f + 1) * dim];
        for j in 0..dim {
            out[j] += v * row[j];
        }
    }
}

struct KnotFit {
    coef: Vec<f64>,
    loss: f64,
    floor: f64,
    rank_deficient: bool,
}

/// Samples `(features, target, conditional mean of target)` at one knot.
trait KnotSampler: Sync {
    fn dim(&self) -> usize;
    /// Fills `state` and `response` from fresh randomness, and returns the
    /// squared distance of `response` from its conditional expectation.
    fn draw(
        &self,
        frozen: &dyn FrozenDrift,
        rng: &mut StreamRng,
        state: &mut [f64],
        response: &mut [f64],
    ) -> f64;
}

fn least_squares(
    x: DMatrix<f64>,
    y: &DMatrix<f64>,
    allow_ridge: bool,
    t: f64,
) -> Result<(DMatrix<f64>, bool), DriftError> {
    let p = x.ncols();
    let qr = x.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diag_min = r.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if diag_max > 0.0 && diag_min > RANK_TOL * diag_max {
        let mut qty = y.clone();
        qr.q_tr_mul(&mut qty);
        let top = qty.rows(0, p).into_owned();
        if let Some(sol) = r.solve_upper_triangular(&top) {
            if sol.iter().all(|v| v.is_finite()) {
                return Ok((sol, false));
            }
        }
    }
    if !allow_ridge {
        return Err(DriftError::RankDeficient { t });
    }
    let xtx = x.transpose() * &x;
    let scale = (xtx.trace() / p as f64).max(1.0);
    let reg = &xtx + DMatrix::identity(p, p) * (RIDGE * scale);
    let xty = x.transpose() * y;
    let sol = match reg.clone().cholesky() {
        Some(ch) => ch.solve(&xty),
        None => SVD::new(reg, true, true)
            .solve(&xty, 1e-14)
            .map_err(|e| DriftError::Precondition(e.to_string()))?,
    };
    Ok((sol, true))
}

fn fit_knot(
    sampler: &dyn KnotSampler,
    frozen: &dyn FrozenDrift,
    basis: &FeatureBasis,
    n: usize,
    seed: u64,
    allow_ridge: bool,
    t: f64,
) -> Result<KnotFit, DriftError> {
    let d = sampler.dim();
    let p = basis.len(d);
    let mut rng = StreamRng::seed_from_u64(seed);
    let mut design = DMatrix::<f64>::zeros(n, p);
    let mut resp = DMatrix::<f64>::zeros(n, d);
    let mut state = vec![0.0; d];
    let mut response = vec![0.0; d];
    let mut phi = vec![0.0; p];
    let mut floor = 0.0;
    for i in 0..n {
        floor += sampler.draw(frozen, &mut rng, &mut state, &mut response);
        basis.features_into(&state, &mut phi);
        for (f, v) in phi.iter().enumerate() {
            design[(i, f)] = *v;
        }
        for j in 0..d {
            resp[(i, j)] = response[j];
        }
    }
    let (sol, rank_deficient) = least_squares(design.clone(), &resp, allow_ridge, t)?;
    let residual = design * &sol - &resp;
    let loss = residual.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let mut coef = Vec::with_capacity(p * d);
    for f in 0..p {
        for j in 0..d {
            coef.push(sol[(f, j)]);
        }
    }
    Ok(KnotFit {
        coef,
        loss,
        floor: floor / n as f64,
        rank_deficient,
    })
}

fn trapezoid(ts: &[f64], ys: &[f64]) -> f64 {
    ts.windows(2)
        .zip(ys.windows(2))
        .map(|(t, y)| 0.5 * (t[1] - t[0]) * (y[0] + y[1]))
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn fit_all<'a, F>(
    make: F,
    spec: &EstimatorSpec,
    knots: Vec<f64>,
    dim: usize,
    sample_count: usize,
    seed: u64,
    objective: &str,
    descriptor: String,
) -> Result<RegressionEstimator, DriftError>
where
    F: Fn(f64) -> Result<(Box<dyn KnotSampler + 'a>, Box<dyn FrozenDrift + 'a>), DriftError> + Sync,
{
    let basis = spec.basis.sanitized();
    basis.validate(dim)?;
    let p = basis.len(dim);
    if sample_count < MIN_SAMPLES_PER_FEATURE * p {
        return Err(DriftError::Precondition(format!(
            "sample_count {sample_count} is below {} (10 x {p} features)",
            MIN_SAMPLES_PER_FEATURE * p
        )));
    }
    let fits: Vec<KnotFit> = knots
        .par_iter()
        .enumerate()
        .map(|(k, &t)| {
            let (sampler, frozen) = make(t)?;
            fit_knot(
                &*sampler,
                &*frozen,
                &basis,
                sample_count,
                derive_task_seed(seed, 1, k as u64),
                spec.allow_ridge,
                t,
            )
        })
        .collect::<Result<_, _>>()?;
    let knot_loss: Vec<f64> = fits.iter().map(|f| f.loss).collect();
    let knot_floor: Vec<f64> = fits.iter().map(|f| f.floor).collect();
    let rank_deficient_knots: Vec<usize> = fits
        .iter()
        .enumerate()
        .filter(|(_, f)| f.rank_deficient)
        .map(|(k, _)| k)
        .collect();
    let metadata = TrainingMetadata {
        objective: objective.into(),
        seed,
        sample_count,
        final_loss: trapezoid(&knots, &knot_loss),
        variance_floor: trapezoid(&knots, &knot_floor),
        knot_loss,
        knot_floor,
        rank_deficient: !rank_deficient_knots.is_empty(),
        rank_deficient_knots,
        descriptor,
    };
    Ok(RegressionEstimator {
        format: ESTIMATOR_FORMAT.into(),
        version: ESTIMATOR_VERSION,
        dim,
        basis,
        knots,
        coefficients: fits.into_iter().map(|f| f.coef).collect(),
        metadata,
    })
}

fn check_window(t_min: f64, t_max: f64, knots: usize) -> Result<(), DriftError> {
    if !(t_min > 0.0 && t_max < 1.0 && t_min < t_max) {
        return Err(DriftError::Precondition(format!(
            "knot window [{t_min}, {t_max}] must satisfy 0 < t_min < t_max < 1"
        )));
    }
    if knots < 2 {
        return Err(DriftError::Precondition("at least two knots are required".into()));
    }
    Ok(())
}

struct InterpolantSampler<'a> {
    target: &'a dyn Target,
    beta: f64,
    beta_dot: f64,
    noise: f64,
    noise_dot: f64,
}

impl KnotSampler for InterpolantSampler<'_> {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn draw(
        &self,
        frozen: &dyn FrozenDrift,
        rng: &mut StreamRng,
        state: &mut [f64],
        response: &mut [f64],
    ) -> f64 {
        let d = state.len();
        let mut xs: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, d);
        self.target.draw(rng, &mut xs);
        for i in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            state[i] = self.beta * xs[i] + self.noise * z;
            response[i] = self.beta_dot * xs[i] + self.noise_dot * z;
        }
        let mut b: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, d);
        frozen.eval_into(state, &mut b);
        (0..d).map(|i| (response[i] - b[i]).powi(2)).sum()
    }
}

/// Fits `b̂_t` by regressing `β̇_t x★ + σ̇_t √t z` on features of
/// `x_t = β_t x★ + √t σ_t z` at every knot.
pub fn fit_regression(
    s: &Schedule,
    target: Arc<dyn Target>,
    spec: &EstimatorSpec,
    sample_count: usize,
    seed: u64,
) -> Result<RegressionEstimator, DriftError> {
    check_window(spec.t_min, spec.t_max, spec.knots)?;
    let knots = chebyshev_knots(spec.t_min, spec.t_max, spec.knots);
    let exact = BaselineDrift::new(s.clone(), target.clone());
    let descriptor = format!("interpolant(schedule={},target={})", s.name, target.descriptor());
    fit_all(
        |t| {
            let sampler = InterpolantSampler {
                target: &*target,
                beta: s.beta(t),
                beta_dot: s.beta_dot(t),
                noise: t.sqrt() * s.sigma(t),
                noise_dot: s.sigma_dot(t) * t.sqrt(),
            };
            Ok((Box::new(sampler) as Box<dyn KnotSampler>, exact.freeze(t)?))
        },
        spec,
        knots,
        target.dim(),
        sample_count,
        seed,
        "interpolant",
        descriptor,
    )
}

struct FollmerSampler<'a> {
    target: &'a dyn Target,
    scale: f64,
    fraction: f64,
    spread: f64,
    /// `g² / (s ε)`.
    star_weight: f64,
    /// `(g² / s) √(K / (ε (1 − K)))`.
    noise_weight: f64,
    prior_mean: Vec<f64>,
    bridge: Option<Box<dyn crate::target::Posterior>>,
}

impl KnotSampler for FollmerSampler<'_> {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn draw(
        &self,
        _frozen: &dyn FrozenDrift,
        rng: &mut StreamRng,
        state: &mut [f64],
        response: &mut [f64],
    ) -> f64 {
        let d = state.len();
        let mut xs: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, d);
        self.target.draw(rng, &mut xs);
        for i in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            state[i] = self.scale * (self.fraction * xs[i] + self.spread * z);
            response[i] = self.star_weight * xs[i] - self.noise_weight * z;
        }
        // Conditional mean of the response through E[x★ | x] and E[z | x].
        let mut m: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, d);
        match &self.bridge {
            Some(p) => p.mean_into(state, &mut m),
            None => m.copy_from_slice(&self.prior_mean),
        }
        let mut err = 0.0;
        for i in 0..d {
            let ez = if self.spread > 0.0 {
                (state[i] / self.scale - self.fraction * m[i]) / self.spread
            } else {
                0.0
            };
            let mean = self.star_weight * m[i] - self.noise_weight * ez;
            err += (response[i] - mean).powi(2);
        }
        err
    }
}

/// Fits the control `û_t` of the Föllmer drift `b^F_t(x) = a_t x + u_t(x)` by
/// regressing `(g²/(s ε)) x★ − (g²/s) √(K/(ε(1−K))) z` on features of the
/// bridge state `s (K x★ + √(ε K (1 − K)) z)`, on knots in
/// `[t_min, 1 − terminal_cutoff]`.
pub fn fit_follmer_regression(
    fsd: Arc<FollmerScheduleData>,
    g: &DiffusionCoefficient,
    target: Arc<dyn Target>,
    spec: &EstimatorSpec,
    sample_count: usize,
    seed: u64,
) -> Result<RegressionEstimator, DriftError> {
    if !(spec.terminal_cutoff > 0.0) {
        return Err(DriftError::TerminalSingularity);
    }
    let t_max = spec.t_max.min(1.0 - spec.terminal_cutoff);
    check_window(spec.t_min, t_max, spec.knots)?;
    let knots = chebyshev_knots(spec.t_min, t_max, spec.knots);
    let prior_mean: Vec<f64> = target.mean().iter().copied().collect();
    let descriptor = format!(
        "follmer-control(eps={},g={},target={})",
        fsd.eps,
        g.descriptor(),
        target.descriptor()
    );
    let zero = super::FnDrift::zero(target.dim());
    fit_all(
        |t| {
            let c = fsd.bridge_at(t);
            let gt = g.eval(t);
            let k = c.fraction;
            if !(k > 0.0 && k < 1.0) {
                return Err(DriftError::Boundary(t));
            }
            let sampler = FollmerSampler {
                target: &*target,
                scale: c.scale,
                fraction: k,
                spread: (c.eps * k * (1.0 - k)).sqrt(),
                star_weight: gt * gt / (c.scale * c.eps),
                noise_weight: gt * gt / c.scale * (k / (c.eps * (1.0 - k))).sqrt(),
                prior_mean: prior_mean.clone(),
                bridge: Some(target.observe(c.obs_scale(), c.obs_var())?),
            };
            Ok((Box::new(sampler) as Box<dyn KnotSampler>, zero.freeze(t)?))
        },
        spec,
        knots,
        target.dim(),
        sample_count,
        seed,
        "follmer-control",
        descriptor,
    )
}

/// Drift field backed by a fitted estimator. For Föllmer controls the
/// reference drift `a_t x` is added back.
#[derive(Clone)]
pub struct EstimatedDrift {
    estimator: Arc<RegressionEstimator>,
    linear: Option<ScalarFn>,
}

impl EstimatedDrift {
    pub fn new(estimator: Arc<RegressionEstimator>) -> Self {
        Self {
            estimator,
            linear: None,
        }
    }

    /// `b_t(x) = a_t x + û_t(x)`.
    pub fn follmer(estimator: Arc<RegressionEstimator>, a: ScalarFn) -> Self {
        Self {
            estimator,
            linear: Some(a),
        }
    }

    pub fn estimator(&self) -> &RegressionEstimator {
        &self.estimator
    }
}

struct FrozenEstimated<'a> {
    basis: &'a FeatureBasis,
    dim: usize,
    coef: Vec<f64>,
    linear: f64,
}

impl FrozenDrift for FrozenEstimated<'_> {
    #[inline]
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        apply(self.basis, &self.coef, self.dim, x, out);
        if self.linear != 0.0 {
            for (o, xi) in out.iter_mut().zip(x) {
                *o += self.linear * xi;
            }
        }
    }
}

impl DriftField for EstimatedDrift {
    fn dim(&self) -> usize {
        self.estimator.dim
    }
    fn kind(&self) -> DriftKind {
        DriftKind::Estimated
    }
    fn descriptor(&self) -> String {
        format!("estimated({})", self.estimator.metadata.descriptor)
    }
    fn freeze(&self, t: f64) -> Result<Box<dyn FrozenDrift + '_>, DriftError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(DriftError::Domain(t));
        }
        Ok(Box::new(FrozenEstimated {
            basis: &self.estimator.basis,
            dim: self.estimator.dim,
            coef: self.estimator.coefficients_at(t),
            linear: self.linear.as_ref().map(|a| a(t)).unwrap_or(0.0),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::FollmerDrift;
    use crate::schedule::follmer_schedule_data;
    use crate::scalar_fn;
    use crate::target::GaussianMixtureTarget;

    fn normal() -> Arc<dyn Target> {
        Arc::new(GaussianMixtureTarget::standard_normal(1))
    }

    fn small_spec() -> EstimatorSpec {
        EstimatorSpec {
            knots: 9,
            ..EstimatorSpec::new(FeatureBasis::Affine)
        }
    }

    #[test]
    fn chebyshev_knots_are_increasing_and_cover_window() {
        let k = chebyshev_knots(1e-3, 1.0 - 1e-3, 64);
        assert_eq!(k.len(), 64);
        assert!((k[0] - 1e-3).abs() < 1e-15 && (k[63] - (1.0 - 1e-3)).abs() < 1e-15);
        assert!(k.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn affine_fit_recovers_linear_drift() {
        let ll = Schedule::linear_linear();
        let spec = EstimatorSpec {
            knots: 5,
            t_min: 0.1,
            t_max: 0.9,
            ..EstimatorSpec::new(FeatureBasis::Affine)
        };
        let est = fit_regression(&ll, normal(), &spec, 100_000, 11).unwrap();
        let c = est.coefficients_at(0.5);
        assert!((c[1] - 2.0 / 3.0).abs() < 0.02, "slope {}", c[1]);
        assert!(c[0].abs() < 0.02, "intercept {}", c[0]);
        assert!(!est.metadata.rank_deficient);
    }

    #[test]
    fn degenerate_target_gives_point_mass_drift() {
        let m = 0.8;
        let tg: Arc<dyn Target> =
            Arc::new(GaussianMixtureTarget::scalar(&[(1.0, m, 1e-16)], 0.0).unwrap());
        let ll = Schedule::linear_linear();
        let est = fit_regression(&ll, tg, &small_spec(), 2000, 5).unwrap();
        for &t in &est.knots {
            let x = 0.3;
            let mut out = [0.0];
            est.eval_into(t, &[x], &mut out);
            let want = ll.beta_dot(t) * m + ll.sigma_dot(t) * (x - ll.beta(t) * m) / ll.sigma(t);
            assert!((out[0] - want).abs() < 1e-6 * want.abs().max(1.0), "t={t}: {} vs {want}", out[0]);
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        let err = fit_regression(&Schedule::linear_linear(), normal(), &small_spec(), 19, 1);
        assert!(matches!(err, Err(DriftError::Precondition(_))));
    }

    #[test]
    fn rank_deficiency_is_flagged_or_rejected() {
        // A radial bump centred far away is numerically constant zero.
        let basis = FeatureBasis::Radial {
            centers: vec![vec![1e3]],
            bandwidth: 0.1,
        };
        let mut spec = EstimatorSpec {
            knots: 3,
            ..EstimatorSpec::new(basis)
        };
        let est = fit_regression(&Schedule::linear_linear(), normal(), &spec, 1000, 2).unwrap();
        assert!(est.metadata.rank_deficient);
        assert!(est.coefficients.iter().flatten().all(|c| c.is_finite()));
        spec.allow_ridge = false;
        assert!(matches!(
            fit_regression(&Schedule::linear_linear(), normal(), &spec, 1000, 2),
            Err(DriftError::RankDeficient { .. })
        ));
    }

    #[test]
    fn json_round_trip_is_bitwise() {
        let spec = EstimatorSpec {
            knots: 7,
            ..EstimatorSpec::new(FeatureBasis::Radial {
                centers: vec![vec![-1.0], vec![0.5]],
                bandwidth: 0.7,
            })
        };
        let est = fit_regression(&Schedule::linear_sqrt(), normal(), &spec, 500, 3).unwrap();
        let back = RegressionEstimator::from_json(&est.to_json().unwrap()).unwrap();
        assert_eq!(est, back);
        for &t in &[0.01, 0.33, 0.71] {
            for &x in &[-2.0, 0.1, 1.9] {
                let (mut a, mut b) = ([0.0], [0.0]);
                est.eval_into(t, &[x], &mut a);
                back.eval_into(t, &[x], &mut b);
                assert_eq!(a[0].to_bits(), b[0].to_bits());
            }
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let est = fit_regression(&Schedule::linear_linear(), normal(), &small_spec(), 100, 3).unwrap();
        let text = est.to_json().unwrap().replace("\"version\": 1", "\"version\": 99");
        assert!(matches!(RegressionEstimator::from_json(&text), Err(DriftError::Format(_))));
    }

    #[test]
    fn radial_bandwidth_is_clamped() {
        let b = FeatureBasis::Radial {
            centers: vec![vec![0.0]],
            bandwidth: 1e-5,
        };
        match b.sanitized() {
            FeatureBasis::Radial { bandwidth, .. } => assert_eq!(bandwidth, MIN_BANDWIDTH),
            _ => unreachable!(),
        }
    }

    #[test]
    fn lipschitz_constants() {
        let affine = FeatureBasis::Affine;
        assert_eq!(affine.lipschitz(&[0.3, -2.0], 1), Some(2.0));
        let poly = FeatureBasis::Polynomial { degree: 2 };
        assert_eq!(poly.lipschitz(&[0.0, 1.0, 1.0], 1), None);
    }

    #[test]
    fn follmer_control_close_to_exact() {
        let fsd = Arc::new(follmer_schedule_data(scalar_fn(|_| 0.0), scalar_fn(|_| 1.0)).unwrap());
        let g = DiffusionCoefficient::constant(1.0);
        let spec = EstimatorSpec {
            knots: 9,
            ..EstimatorSpec::new(FeatureBasis::Affine)
        };
        let est = fit_follmer_regression(fsd.clone(), &g, normal(), &spec, 100_000, 9).unwrap();
        let exact = FollmerDrift::new(fsd, normal());
        for (k, &t) in est.knots.iter().enumerate() {
            // Probe within one standard deviation of the state at time t.
            for &c in &[-1.0, 0.0, 1.0] {
                let x = c * t.sqrt();
                let mut u = [0.0];
                apply(&est.basis, &est.coefficients[k], 1, &[x], &mut u);
                let b = exact.eval(t, &[x]).unwrap()[0];
                // The control target has standard deviation 1/√(1 − t) here.
                let tol = 0.02 + 6.0 / ((1.0 - t) * 100_000.0).sqrt();
                assert!((u[0] - b).abs() < tol, "t={t} x={x}: {} vs {b}", u[0]);
            }
        }
    }

    #[test]
    fn follmer_control_with_zero_g_is_zero() {
        let fsd = Arc::new(follmer_schedule_data(scalar_fn(|_| 0.0), scalar_fn(|_| 1.0)).unwrap());
        let est = fit_follmer_regression(fsd, &DiffusionCoefficient::constant(0.0), normal(), &small_spec(), 200, 1)
            .unwrap();
        assert!(est.coefficients.iter().flatten().all(|c| *c == 0.0));
    }

    #[test]
    fn zero_terminal_cutoff_rejected() {
        let fsd = Arc::new(follmer_schedule_data(scalar_fn(|_| 0.0), scalar_fn(|_| 1.0)).unwrap());
        let spec = EstimatorSpec {
            terminal_cutoff: 0.0,
            ..small_spec()
        };
        assert!(matches!(
            fit_follmer_regression(fsd, &DiffusionCoefficient::constant(1.0), normal(), &spec, 200, 1),
            Err(DriftError::TerminalSingularity)
        ));
    }
}
