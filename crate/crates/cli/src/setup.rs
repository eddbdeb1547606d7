use std::sync::Arc;

use follmer_core::drift::{
    BaselineDrift, DiffusionCoefficient, DriftField, EstimatedDrift, GSpec, RegressionEstimator, TunedDrift,
    TunedField,
};
use follmer_core::{Schedule, Target};

use crate::config::DriftSpec;
use crate::{CliError, Context};

/// Objects shared by every subcommand.
pub struct Setup {
    pub schedule: Schedule,
    pub target: Arc<dyn Target>,
    pub g: DiffusionCoefficient,
}

pub fn setup(ctx: &Context) -> Result<Setup, CliError> {
    let cfg = &ctx.config;
    let schedule = cfg.schedule.build().map_err(CliError::config)?;
    let target = cfg.target.build().map_err(CliError::config)?;
    let g = cfg.g.build(&schedule).map_err(CliError::config)?;
    Ok(Setup { schedule, target, g })
}

/// Exponent `p` of a `−p x / t` restoring term in the tuned drift at the
/// origin: the limit of `t · ½ (g² − σ²) A β̇`, extrapolated from two small
/// times. Zero when the drift is regular.
pub fn singular_exponent(s: &Schedule, g: &DiffusionCoefficient) -> f64 {
    let at = |t: f64| {
        let (gt, sg) = (g.eval(t), s.sigma(t));
        0.5 * (gt * gt - sg * sg) * s.big_a(t) * s.beta_dot(t) * t
    };
    let h = 1e-6;
    let p = 2.0 * at(h) - at(2.0 * h);
    if p.is_finite() && p > 1e-4 {
        p
    } else {
        0.0
    }
}

/// The drift to simulate, and the exponent of its singular part.
pub fn drift(ctx: &Context, su: &Setup) -> Result<(Box<dyn DriftField>, f64), CliError> {
    let is_baseline = ctx.config.g == GSpec::Baseline;
    let p = if is_baseline { 0.0 } else { singular_exponent(&su.schedule, &su.g) };
    let field: Box<dyn DriftField> = match &ctx.config.drift {
        DriftSpec::Oracle if is_baseline => Box::new(BaselineDrift::new(su.schedule.clone(), su.target.clone())),
        DriftSpec::Oracle => Box::new(
            TunedDrift::new(su.schedule.clone(), su.target.clone(), su.g.clone()).map_err(CliError::config)?,
        ),
        DriftSpec::Estimated { estimator } => {
            let path = ctx.resolve(estimator);
            let est = RegressionEstimator::load(&path)
                .map_err(|e| CliError::Config(format!("estimator {}: {e}", path.display())))?;
            if est.dim != su.target.dim() {
                return Err(CliError::Config(format!(
                    "estimator dimension {} does not match target dimension {}",
                    est.dim,
                    su.target.dim()
                )));
            }
            let est = Arc::new(est);
            if est.metadata.objective == "follmer-control" {
                return Ok((Box::new(EstimatedDrift::follmer(est, su.schedule.a_ref_fn())), 0.0));
            }
            let base = EstimatedDrift::new(est);
            if is_baseline {
                Box::new(base)
            } else {
                Box::new(TunedField::new(base, su.schedule.clone(), su.g.clone()))
            }
        }
    };
    Ok((field, p))
}
