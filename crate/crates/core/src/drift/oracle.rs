use std::sync::Arc;

use smallvec::SmallVec;

use super::{DiffusionCoefficient, DriftError, DriftField, DriftKind, FrozenDrift};
use crate::schedule::{FollmerScheduleData, Schedule};
use crate::target::{Posterior, Target};
use crate::StreamRng;

/// Below this time the baseline drift uses the conditional-expectation form,
/// above it the score form.
pub const BASELINE_FORM_SWITCH: f64 = 0.01;

/// Time used in place of `t = 0` when a coefficient only has a limit there.
const ORIGIN_PROBE: f64 = 1e-9;

type Buf = SmallVec<[f64; 8]>;

/// `b_t(x) = E[β̇_t x★ + σ̇_t √t z | x_t = x]`.
#[derive(Clone)]
pub struct BaselineDrift {
    schedule: Schedule,
    target: Arc<dyn Target>,
}

impl BaselineDrift {
    pub fn new(schedule: Schedule, target: Arc<dyn Target>) -> Self {
        Self { schedule, target }
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn target(&self) -> &Arc<dyn Target> {
        &self.target
    }

    pub(crate) fn freeze_baseline(&self, t: f64) -> Result<FrozenBaseline, DriftError> {
        let s = &self.schedule;
        let dim = self.target.dim();
        if !(0.0..=1.0).contains(&t) {
            return Err(DriftError::Domain(t));
        }
        if t == 0.0 {
            let bd = s.beta_dot(0.0);
            let value = self.target.mean().iter().map(|m| bd * m).collect();
            return Ok(FrozenBaseline {
                dim,
                form: Form::Origin { value },
                post: None,
            });
        }
        let (beta, bd, sig, sd) = (s.beta(t), s.beta_dot(t), s.sigma(t), s.sigma_dot(t));
        if t == 1.0 {
            // σ_t → 0 and (x − β E)/σ → 0, so only β̇_1 x survives when σ̇_1 is finite.
            if !sd.is_finite() {
                return Err(DriftError::Domain(t));
            }
            return Ok(FrozenBaseline {
                dim,
                form: Form::Linear { slope: bd },
                post: None,
            });
        }
        if t < BASELINE_FORM_SWITCH {
            let post = self.target.observe(beta, t * sig * sig)?;
            Ok(FrozenBaseline {
                dim,
                form: Form::Conditional {
                    beta,
                    beta_dot: bd,
                    sigma: sig,
                    sigma_dot: sd,
                },
                post: Some(post),
            })
        } else {
            let r = t.sqrt() * sig / beta;
            let post = self.target.observe(1.0, r * r)?;
            Ok(FrozenBaseline {
                dim,
                form: Form::Score {
                    slope: bd / beta,
                    score_weight: t * sig * sig / beta * (bd / beta - sd / sig),
                    inv_beta: 1.0 / beta,
                },
                post: Some(post),
            })
        }
    }
}

enum Form {
    Origin {
        value: Vec<f64>,
    },
    Linear {
        slope: f64,
    },
    Conditional {
        beta: f64,
        beta_dot: f64,
        sigma: f64,
        sigma_dot: f64,
    },
    Score {
        slope: f64,
        score_weight: f64,
        inv_beta: f64,
    },
}

pub(crate) struct FrozenBaseline {
    dim: usize,
    form: Form,
    post: Option<Box<dyn Posterior>>,
}

impl FrozenDrift for FrozenBaseline {
    #[inline]
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        match &self.form {
            Form::Origin { value } => out[..d].copy_from_slice(value),
            Form::Linear { slope } => {
                for i in 0..d {
                    out[i] = slope * x[i];
                }
            }
            Form::Conditional {
                beta,
                beta_dot,
                sigma,
                sigma_dot,
            } => {
                let post = self.post.as_ref().expect("conditional form has a posterior");
                let mut m: Buf = SmallVec::from_elem(0.0, d);
                post.mean_into(x, &mut m);
                for i in 0..d {
                    out[i] = beta_dot * m[i] + sigma_dot * (x[i] - beta * m[i]) / sigma;
                }
            }
            Form::Score {
                slope,
                score_weight,
                inv_beta,
            } => {
                let post = self.post.as_ref().expect("score form has a posterior");
                let mut y: Buf = SmallVec::with_capacity(d);
                for xi in &x[..d] {
                    y.push(xi * inv_beta);
                }
                let mut sc: Buf = SmallVec::from_elem(0.0, d);
                post.score_into(&y, &mut sc);
                for i in 0..d {
                    out[i] = slope * x[i] + score_weight * sc[i];
                }
            }
        }
    }

    fn terminal_draw(&self, x: &[f64], rng: &mut StreamRng, out: &mut [f64]) -> bool {
        let Some(post) = self.post.as_ref() else {
            return false;
        };
        match &self.form {
            Form::Score { inv_beta, .. } => {
                let y: Buf = x.iter().map(|v| v * inv_beta).collect();
                post.sample_into(&y, rng, out);
            }
            _ => post.sample_into(x, rng, out),
        }
        true
    }
}

impl DriftField for BaselineDrift {
    fn dim(&self) -> usize {
        self.target.dim()
    }
    fn kind(&self) -> DriftKind {
        DriftKind::Baseline
    }
    fn descriptor(&self) -> String {
        format!(
            "baseline(schedule={},target={})",
            self.schedule.name,
            self.target.descriptor()
        )
    }
    fn freeze(&self, t: f64) -> Result<Box<dyn FrozenDrift + '_>, DriftError> {
        Ok(Box::new(self.freeze_baseline(t)?))
    }
}

/// `b^g_t(x) = b_t(x) + ½ (g_t² − σ_t²) A_t (β_t b_t(x) − β̇_t x)`, written as
/// `c₁ b_t(x) + c₂ x`.
#[derive(Clone)]
pub struct TunedDrift {
    base: BaselineDrift,
    g: DiffusionCoefficient,
}

/// Ratio beyond which a boundary quantity is considered divergent.
const DIVERGENCE_RATIO: f64 = 10.0;

impl TunedDrift {
    /// Checks the boundary behaviour of `g` before accepting it: the limit of
    /// `t⁻¹(g² − σ²)` at 0 (skipped in the singular regime) and boundedness of
    /// the drift multiplier `1 + ½ β A (g² − σ²)` at 1.
    pub fn new(
        schedule: Schedule,
        target: Arc<dyn Target>,
        g: DiffusionCoefficient,
    ) -> Result<Self, DriftError> {
        let drift = Self::new_unchecked(schedule, target, g);
        drift.check_boundary()?;
        Ok(drift)
    }

    /// Skips the boundary-limit check.
    pub fn new_unchecked(
        schedule: Schedule,
        target: Arc<dyn Target>,
        g: DiffusionCoefficient,
    ) -> Self {
        Self {
            base: BaselineDrift::new(schedule, target),
            g,
        }
    }

    pub fn g(&self) -> &DiffusionCoefficient {
        &self.g
    }

    pub fn schedule(&self) -> &Schedule {
        &self.base.schedule
    }

    fn check_boundary(&self) -> Result<(), DriftError> {
        let s = &self.base.schedule;
        let origin = |t: f64| {
            let (g, sig) = (self.g.eval(t), s.sigma(t));
            (g * g - sig * sig) / t
        };
        if !s.beta_dot_zero_at_origin {
            let (near, far) = (origin(1e-8), origin(1e-4));
            if !near.is_finite() || near.abs() > DIVERGENCE_RATIO * far.abs().max(1.0) {
                return Err(DriftError::InvalidG {
                    limit: "t -> 0 of (g^2 - sigma^2)/t",
                    detail: format!("value {near:e} at t=1e-8 against {far:e} at t=1e-4"),
                });
            }
        }
        let end = s.validation_end.min(1.0);
        let (near, far) = (self.multipliers(end - 1e-8).0, self.multipliers(end - 1e-4).0);
        if !near.is_finite() || near.abs() > DIVERGENCE_RATIO * far.abs().max(1.0) {
            return Err(DriftError::InvalidG {
                limit: "t -> 1 of 1 + beta A (g^2 - sigma^2)/2",
                detail: format!("value {near:e} at 1-1e-8 against {far:e} at 1-1e-4"),
            });
        }
        Ok(())
    }

    /// `(c₁, c₂)` at time `t ∈ (0, 1)`.
    pub fn multipliers(&self, t: f64) -> (f64, f64) {
        let s = &self.base.schedule;
        let (g, sig) = (self.g.eval(t), s.sigma(t));
        let diff = g * g - sig * sig;
        let a = s.big_a(t);
        let c1 = 1.0 + 0.5 * s.beta(t) * a * diff;
        let c2 = -0.5 * diff * a * s.beta_dot(t);
        (c1, c2)
    }
}

pub(crate) struct FrozenTuned {
    base: FrozenBaseline,
    c1: f64,
    c2: f64,
}

impl FrozenDrift for FrozenTuned {
    #[inline]
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self.base.eval_into(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.c1 * *o + self.c2 * xi;
        }
    }

    fn terminal_draw(&self, x: &[f64], rng: &mut StreamRng, out: &mut [f64]) -> bool {
        self.base.terminal_draw(x, rng, out)
    }
}

impl TunedDrift {
    pub(crate) fn freeze_tuned(&self, t: f64) -> Result<FrozenTuned, DriftError> {
        if !(0.0..1.0).contains(&t) {
            return Err(DriftError::Domain(t));
        }
        let base = self.base.freeze_baseline(t)?;
        let (c1, c2) = self.multipliers(if t == 0.0 { ORIGIN_PROBE } else { t });
        Ok(FrozenTuned { base, c1, c2 })
    }
}

impl DriftField for TunedDrift {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn kind(&self) -> DriftKind {
        DriftKind::Tuned
    }
    fn descriptor(&self) -> String {
        format!(
            "tuned(schedule={},target={},g={})",
            self.base.schedule.name,
            self.base.target.descriptor(),
            self.g.descriptor()
        )
    }
    fn freeze(&self, t: f64) -> Result<Box<dyn FrozenDrift + '_>, DriftError> {
        Ok(Box::new(self.freeze_tuned(t)?))
    }
}

/// `c₁ b̂ + c₂ x` for an arbitrary drift `b̂`, typically an estimate. With the
/// exact baseline drift this is [`TunedDrift`].
#[derive(Clone)]
pub struct TunedField<D> {
    inner: D,
    schedule: Schedule,
    g: DiffusionCoefficient,
}

impl<D: DriftField> TunedField<D> {
    pub fn new(inner: D, schedule: Schedule, g: DiffusionCoefficient) -> Self {
        Self { inner, schedule, g }
    }
}

struct FrozenScaled<'a> {
    inner: Box<dyn FrozenDrift + 'a>,
    c1: f64,
    c2: f64,
}

impl FrozenDrift for FrozenScaled<'_> {
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self.inner.eval_into(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.c1 * *o + self.c2 * xi;
        }
    }

    fn terminal_draw(&self, x: &[f64], rng: &mut StreamRng, out: &mut [f64]) -> bool {
        self.inner.terminal_draw(x, rng, out)
    }
}

impl<D: DriftField> DriftField for TunedField<D> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn kind(&self) -> DriftKind {
        self.inner.kind()
    }
    fn descriptor(&self) -> String {
        format!("tuned-field(g={},{})", self.g.descriptor(), self.inner.descriptor())
    }
    fn freeze(&self, t: f64) -> Result<Box<dyn FrozenDrift + '_>, DriftError> {
        if !(0.0..1.0).contains(&t) {
            return Err(DriftError::Domain(t));
        }
        let tt = if t == 0.0 { ORIGIN_PROBE } else { t };
        let s = &self.schedule;
        let (g, sig) = (self.g.eval(tt), s.sigma(tt));
        let diff = g * g - sig * sig;
        let a = s.big_a(tt);
        Ok(Box::new(FrozenScaled {
            inner: self.inner.freeze(t)?,
            c1: 1.0 + 0.5 * s.beta(tt) * a * diff,
            c2: -0.5 * diff * a * s.beta_dot(tt),
        }))
    }
}

/// The regular part `b_t(x) + p (x − x0) / t` of a drift whose singular part
/// is `−p (x − x0) / t`.
#[derive(Clone)]
pub struct RegularPart<D> {
    inner: D,
    p: f64,
    x0: Vec<f64>,
}

impl<D: DriftField> RegularPart<D> {
    pub fn new(inner: D, p: f64, x0: Vec<f64>) -> Result<Self, DriftError> {
        if x0.len() != inner.dim() {
            return Err(DriftError::DimensionMismatch {
                expected: inner.dim(),
                got: x0.len(),
            });
        }
        Ok(Self { inner, p, x0 })
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

struct FrozenRegular<'a> {
    inner: Box<dyn FrozenDrift + 'a>,
    weight: f64,
    x0: &'a [f64],
}

impl FrozenDrift for FrozenRegular<'_> {
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self.inner.eval_into(x, out);
        for i in 0..out.len() {
            out[i] += self.weight * (x[i] - self.x0[i]);
        }
    }

    fn terminal_draw(&self, x: &[f64], rng: &mut StreamRng, out: &mut [f64]) -> bool {
        self.inner.terminal_draw(x, rng, out)
    }
}

impl<D: DriftField> DriftField for RegularPart<D> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn kind(&self) -> DriftKind {
        self.inner.kind()
    }
    fn descriptor(&self) -> String {
        format!("regular-part(p={},{})", self.p, self.inner.descriptor())
    }
    fn freeze(&self, t: f64) -> Result<Box<dyn FrozenDrift + '_>, DriftError> {
        if t <= 0.0 {
            return Err(DriftError::Domain(t));
        }
        Ok(Box::new(FrozenRegular {
            inner: self.inner.freeze(t)?,
            weight: self.p / t,
            x0: &self.x0,
        }))
    }
}

/// Föllmer drift for a general reference process,
/// `b^F_t(x) = a_t x + g_t² (E[x★ | x_t = x] − x / s_t) / (s_t ε (1 − K_t))`
/// with the expectation taken under the bridge `x_t = s_t (K_t x★ + √(ε K_t (1 − K_t)) z)`.
#[derive(Clone)]
pub struct FollmerDrift {
    fsd: Arc<FollmerScheduleData>,
    target: Arc<dyn Target>,
}

impl FollmerDrift {
    pub fn new(fsd: Arc<FollmerScheduleData>, target: Arc<dyn Target>) -> Self {
        Self { fsd, target }
    }

    pub fn data(&self) -> &FollmerScheduleData {
        &self.fsd
    }
}

struct FrozenFollmer {
    dim: usize,
    a: f64,
    inv_scale: f64,
    weight: f64,
    /// `None` at the origin, where `E[x★ | x_0] = E[x★]`.
    post: Option<Box<dyn Posterior>>,
    prior_mean: Vec<f64>,
}

impl FrozenDrift for FrozenFollmer {
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut m: Buf = SmallVec::from_elem(0.0, d);
        match &self.post {
            Some(p) => p.mean_into(x, &mut m),
            None => m.copy_from_slice(&self.prior_mean),
        }
        for i in 0..d {
            out[i] = self.a * x[i] + self.weight * (m[i] - x[i] * self.inv_scale);
        }
    }

    fn terminal_draw(&self, x: &[f64], rng: &mut StreamRng, out: &mut [f64]) -> bool {
        match &self.post {
            Some(p) => {
                p.sample_into(x, rng, out);
                true
            }
            None => false,
        }
    }
}

impl DriftField for FollmerDrift {
    fn dim(&self) -> usize {
        self.target.dim()
    }
    fn kind(&self) -> DriftKind {
        DriftKind::FollmerGeneric
    }
    fn descriptor(&self) -> String {
        format!(
            "follmer(eps={},target={})",
            self.fsd.eps,
            self.target.descriptor()
        )
    }
    fn freeze(&self, t: f64) -> Result<Box<dyn FrozenDrift + '_>, DriftError> {
        if !(0.0..1.0).contains(&t) {
            return Err(DriftError::Domain(t));
        }
        let c = self.fsd.bridge_at(t);
        let prior_mean: Vec<f64> = self.target.mean().iter().copied().collect();
        let weight = c.g * c.g / (c.scale * c.eps * (1.0 - c.fraction));
        let inv_scale = 1.0 / c.scale;
        if t == 0.0 {
            if !(weight.is_finite() && c.a.is_finite()) {
                return Err(DriftError::Boundary(t));
            }
            return Ok(Box::new(FrozenFollmer {
                dim: self.dim(),
                a: c.a,
                inv_scale,
                weight,
                post: None,
                prior_mean,
            }));
        }
        if !(c.fraction > 0.0 && c.fraction < 1.0) {
            return Err(DriftError::Boundary(t));
        }
        let post = self.target.observe(c.obs_scale(), c.obs_var())?;
        Ok(Box::new(FrozenFollmer {
            dim: self.dim(),
            a: c.a,
            inv_scale,
            weight,
            post: Some(post),
            prior_mean,
        }))
    }
}

/// Closed forms of the Föllmer drift for two explicit schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FollmerVariant {
    /// β = t, σ = 1 − t: `E[x★ − 2√t z | x_t = x]`.
    LinearLinear,
    /// β = t, σ = √(1 − t): `x/t + ∇ log ρ_t(x)`.
    LinearSqrt,
}

#[derive(Clone)]
pub struct SpecialFollmerDrift {
    variant: FollmerVariant,
    target: Arc<dyn Target>,
}

impl SpecialFollmerDrift {
    pub fn new(variant: FollmerVariant, target: Arc<dyn Target>) -> Self {
        Self { variant, target }
    }
}

struct FrozenSpecial {
    dim: usize,
    variant: FollmerVariant,
    t: f64,
    post: Box<dyn Posterior>,
}

impl FrozenDrift for FrozenSpecial {
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let t = self.t;
        match self.variant {
            FollmerVariant::LinearLinear => {
                let mut m: Buf = SmallVec::from_elem(0.0, d);
                self.post.mean_into(x, &mut m);
                for i in 0..d {
                    let zt = (x[i] - t * m[i]) / (1.0 - t);
                    out[i] = m[i] - 2.0 * zt;
                }
            }
            FollmerVariant::LinearSqrt => {
                self.post.score_into(x, out);
                for i in 0..d {
                    out[i] += x[i] / t;
                }
            }
        }
    }

    fn terminal_draw(&self, x: &[f64], rng: &mut StreamRng, out: &mut [f64]) -> bool {
        self.post.sample_into(x, rng, out);
        true
    }
}

impl DriftField for SpecialFollmerDrift {
    fn dim(&self) -> usize {
        self.target.dim()
    }
    fn kind(&self) -> DriftKind {
        DriftKind::FollmerSpecial
    }
    fn descriptor(&self) -> String {
        format!("follmer-special({:?},target={})", self.variant, self.target.descriptor())
    }
    fn freeze(&self, t: f64) -> Result<Box<dyn FrozenDrift + '_>, DriftError> {
        if !(t > 0.0 && t < 1.0) {
            return Err(DriftError::Domain(t));
        }
        let var = match self.variant {
            FollmerVariant::LinearLinear => t * (1.0 - t) * (1.0 - t),
            FollmerVariant::LinearSqrt => t * (1.0 - t),
        };
        Ok(Box::new(FrozenSpecial {
            dim: self.dim(),
            variant: self.variant,
            t,
            post: self.target.observe(t, var)?,
        }))
    }
}
