use nalgebra::DMatrix;

use super::{DriftError, DriftField};
use crate::schedule::Schedule;
use crate::target::GaussianMixtureTarget;

/// Distance from `t = 1` beyond which the unsmoothed bound is not offered.
const UNSMOOTHED_CUTOFF: f64 = 1e-3;

/// Upper bound on the operator norm of `∇_x b_t` for a mixture target.
///
/// With smoothing `η > 0` the bound is
/// `|(σσ̇t + ββ̇η²)/(σ²t + β²η²)| + 4R² |βσt(β̇σ − βσ̇)/(σ²t + β²η²)²|`,
/// valid on `(0, 1]`. With `η = 0` the bound
/// `|σ̇/σ| + 4R² β/(tσ²) |β̇ − βσ̇/σ|` is used on `(0, 1 − 10⁻³]`.
/// `R` is [`GaussianMixtureTarget::support_radius`].
pub fn lipschitz_bound(
    s: &Schedule,
    target: &GaussianMixtureTarget,
    t: f64,
) -> Result<f64, DriftError> {
    let eta = target.smoothing_eta();
    if !(t > 0.0 && t <= 1.0) {
        return Err(DriftError::BoundUnavailable(format!("t = {t} is outside (0, 1]")));
    }
    let r = target.support_radius();
    let (b, bd, sg, sd) = (s.beta(t), s.beta_dot(t), s.sigma(t), s.sigma_dot(t));
    if eta > 0.0 {
        let e2 = eta * eta;
        let den = sg * sg * t + b * b * e2;
        let first = ((sg * sd * t + b * bd * e2) / den).abs();
        let second = 4.0 * r * r * (b * sg * t * (bd * sg - b * sd) / (den * den)).abs();
        Ok(first + second)
    } else {
        if t > 1.0 - UNSMOOTHED_CUTOFF {
            return Err(DriftError::BoundUnavailable(format!(
                "target has eta = 0 and t = {t} > 1 - {UNSMOOTHED_CUTOFF}"
            )));
        }
        Ok((sd / sg).abs() + 4.0 * r * r * b / (t * sg * sg) * (bd - b * sd / sg).abs())
    }
}

/// Largest spectral norm of the central finite-difference Jacobian of the
/// drift over the probe points.
pub fn empirical_lipschitz(
    drift: &dyn DriftField,
    t: f64,
    probes: &[Vec<f64>],
    h: f64,
) -> Result<f64, DriftError> {
    let d = drift.dim();
    let frozen = drift.freeze(t)?;
    let mut xp = vec![0.0; d];
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    let mut worst = 0.0f64;
    for x in probes {
        let mut jac = DMatrix::<f64>::zeros(d, d);
        for j in 0..d {
            xp.copy_from_slice(x);
            xp[j] = x[j] + h;
            frozen.eval_into(&xp, &mut fp);
            xp[j] = x[j] - h;
            frozen.eval_into(&xp, &mut fm);
            for i in 0..d {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        worst = worst.max(jac.singular_values().max());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::BaselineDrift;
    use nalgebra::{DMatrix, DVector};
    use std::sync::Arc;

    #[test]
    fn pure_noise_target_keeps_only_first_term() {
        let s = Schedule::linear_linear();
        let eta = 0.7;
        let tg = GaussianMixtureTarget::new(
            vec![1.0],
            vec![DVector::zeros(1)],
            vec![DMatrix::zeros(1, 1)],
            eta,
        )
        .unwrap();
        assert_eq!(tg.support_radius(), 0.0);
        let t = 0.4;
        let (b, bd, sg, sd) = (s.beta(t), s.beta_dot(t), s.sigma(t), s.sigma_dot(t));
        let e2 = eta * eta;
        let first = ((sg * sd * t + b * bd * e2) / (sg * sg * t + b * b * e2)).abs();
        assert_eq!(lipschitz_bound(&s, &tg, t).unwrap(), first);
        // For a Gaussian the drift is linear and the bound is attained.
        let drift = BaselineDrift::new(s, Arc::new(tg));
        let emp = empirical_lipschitz(&drift, t, &[vec![0.3]], 1e-4).unwrap();
        assert!((emp - first).abs() < 1e-6);
    }

    #[test]
    fn smoothed_bound_dominates_probes() {
        let s = Schedule::linear_linear();
        let tg = GaussianMixtureTarget::scalar(&[(0.5, -0.8, 0.01), (0.5, 0.6, 0.01)], 0.5).unwrap();
        let bound = lipschitz_bound(&s, &tg, 0.5).unwrap();
        assert!(bound.is_finite());
        let probes: Vec<Vec<f64>> = (0..1000).map(|i| vec![-4.0 + 8.0 * i as f64 / 999.0]).collect();
        let drift = BaselineDrift::new(s, Arc::new(tg));
        let emp = empirical_lipschitz(&drift, 0.5, &probes, 1e-5).unwrap();
        assert!(emp <= bound, "{emp} > {bound}");
    }

    #[test]
    fn unsmoothed_bound_unavailable_near_one_and_at_zero() {
        let s = Schedule::linear_linear();
        let tg = GaussianMixtureTarget::standard_normal(1);
        assert!(lipschitz_bound(&s, &tg, 0.5).is_ok());
        assert!(matches!(lipschitz_bound(&s, &tg, 0.9999), Err(DriftError::BoundUnavailable(_))));
        assert!(matches!(lipschitz_bound(&s, &tg, 0.0), Err(DriftError::BoundUnavailable(_))));
    }
}
