//! Cross-checks between independent routes to the same quantity.

use std::sync::Arc;

use follmer_core::analysis::{kl_path, psi, ErrorProfile};
use follmer_core::drift::{BaselineDrift, TunedDrift};
use follmer_core::schedule::follmer_schedule_data;
use follmer_core::sde::{simulate_reference, PathEnsemble};
use follmer_core::target::{marginal_score, posterior_mean};
use follmer_core::{
    scalar_fn, DiffusionCoefficient, DriftField, GaussianMixtureTarget, IntegratorConfig, QuadratureTarget1D,
    Schedule, Target,
};
use proptest::prelude::*;

fn gaussian_pair(mean: f64, std: f64) -> (GaussianMixtureTarget, QuadratureTarget1D) {
    (
        GaussianMixtureTarget::scalar(&[(1.0, mean, std * std)], 0.0).unwrap(),
        QuadratureTarget1D::gaussian(mean, std).unwrap(),
    )
}

#[test]
fn quadrature_and_closed_form_posteriors_agree() {
    let (closed, quad) = gaussian_pair(0.4, 0.8);
    for s in Schedule::catalog() {
        for &t in &[0.05, 0.3, 0.6, 0.95] {
            for &x in &[-2.0, -0.3, 0.0, 1.1, 2.5] {
                let a = posterior_mean(&closed, &s, t, &[x]).unwrap()[0];
                let b = posterior_mean(&quad, &s, t, &[x]).unwrap()[0];
                assert!((a - b).abs() < 1e-8 * a.abs().max(1.0), "{} t={t} x={x}: {a} vs {b}", s.name);
                let sa = marginal_score(&closed, &s, t, &[x]).unwrap()[0];
                let sb = marginal_score(&quad, &s, t, &[x]).unwrap()[0];
                assert!((sa - sb).abs() < 1e-7 * sa.abs().max(1.0), "{} t={t} x={x}: {sa} vs {sb}", s.name);
            }
        }
    }
}

/// For a centred Gaussian target every tuned drift is `c_t x`, so the
/// marginal variance obeys `v' = 2 c_t v + g_t²`. Matching marginals means
/// `v = β² + t σ²` solves it for every `g`.
#[test]
fn tuned_drift_satisfies_variance_ode() {
    let target: Arc<dyn Target> = Arc::new(GaussianMixtureTarget::standard_normal(1));
    for s in [Schedule::linear_linear(), Schedule::linear_sqrt(), Schedule::trigonometric()] {
        let gs = [
            DiffusionCoefficient::baseline(&s),
            DiffusionCoefficient::follmer(&s),
            {
                let sc = s.clone();
                DiffusionCoefficient::from_fn("scaled", scalar_fn(move |t| sc.sigma(t) * (1.0 + 0.5 * t)))
            },
        ];
        for g in gs {
            let drift = TunedDrift::new_unchecked(s.clone(), target.clone(), g.clone());
            for &t in &[0.1, 0.35, 0.5, 0.8] {
                let mut c = [0.0];
                drift.freeze(t).unwrap().eval_into(&[1.0], &mut c);
                let v = s.reference_variance(t);
                let h = 1e-5;
                let dv = (s.reference_variance(t + h) - s.reference_variance(t - h)) / (2.0 * h);
                let rhs = 2.0 * c[0] * v + g.eval(t).powi(2);
                assert!((dv - rhs).abs() < 1e-6, "{} g={} t={t}: {dv} vs {rhs}", s.name, g.descriptor());
            }
        }
    }
}

#[test]
fn baseline_drift_is_posterior_velocity() {
    // b_t(x) = β̇ E[x★|x] + σ̇ √t E[z|x], with E[z|x] = (x − β E[x★|x]) / (√t σ).
    let target: Arc<dyn Target> = Arc::new(GaussianMixtureTarget::scalar(&[(0.3, -1.0, 0.2), (0.7, 1.5, 0.5)], 0.0).unwrap());
    let s = Schedule::trigonometric();
    let drift = BaselineDrift::new(s.clone(), target.clone());
    for &t in &[0.2, 0.5, 0.9] {
        let f = drift.freeze(t).unwrap();
        for &x in &[-1.0, 0.2, 2.0] {
            let m = posterior_mean(&*target, &s, t, &[x]).unwrap()[0];
            let ez = (x - s.beta(t) * m) / (t.sqrt() * s.sigma(t));
            let want = s.beta_dot(t) * m + s.sigma_dot(t) * t.sqrt() * ez;
            let mut got = [0.0];
            f.eval_into(&[x], &mut got);
            assert!((got[0] - want).abs() < 1e-10 * want.abs().max(1.0), "t={t} x={x}: {} vs {want}", got[0]);
        }
    }
}

#[test]
fn reference_process_matches_closed_form_variance() {
    let s = Schedule::linear_linear();
    let fsd = follmer_schedule_data(s.a_ref_fn(), s.follmer_g()).unwrap();
    let cfg = IntegratorConfig::new(40, 17).with_stride(10).with_clip(0.0);
    let ens = simulate_reference(s.a_ref_fn(), s.follmer_g(), 1, &cfg, 40_000).unwrap();
    for k in 1..ens.times.len() {
        let t = ens.times[k];
        let want = fsd.reference_variance(t);
        let got = ens.covariance_at(k)[(0, 0)];
        let tol = 4.0 * want * (2.0 / 40_000f64).sqrt();
        assert!((got - want).abs() < tol, "t={t}: {got} vs {want}");
        // With a = a_ref and g = g^F the reference marginal is the interpolant
        // marginal of a standard normal target.
        assert!((want - s.reference_variance(t)).abs() < 1e-8, "t={t}");
    }
}

#[test]
fn ensemble_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = Schedule::linear_sqrt();
    let cfg = IntegratorConfig::new(20, 3).with_clip(0.0);
    let ens = simulate_reference(s.a_ref_fn(), s.follmer_g(), 2, &cfg, 50).unwrap();
    let path = dir.path().join("paths.bin");
    ens.save_binary(&path).unwrap();
    let back = PathEnsemble::load_binary(&path).unwrap();
    assert_eq!(ens, back);
}

#[test]
fn kl_scales_linearly_with_error_level() {
    let s = Schedule::quadratic_linear();
    let g = DiffusionCoefficient::follmer(&s);
    let one = kl_path(&s, &g, &ErrorProfile::Constant(1.0), 1e-3).unwrap().total;
    let three = kl_path(&s, &g, &ErrorProfile::Constant(3.0), 1e-3).unwrap().total;
    assert!((three - 3.0 * one).abs() < 1e-9 * three);
}

proptest! {
    #[test]
    fn psi_never_beats_follmer_choice(t in 0.01f64..0.99, scale in 0.05f64..5.0) {
        for s in Schedule::catalog() {
            let (alpha, gamma) = (s.alpha(t), s.gamma(t));
            let g_sq = s.g_follmer_sq(t);
            let best = psi(alpha, gamma, g_sq);
            let other = psi(alpha, gamma, g_sq * scale);
            prop_assert!(best <= other * (1.0 + 1e-12) + 1e-12, "{} t={}: {} > {}", s.name, t, best, other);
        }
    }

    #[test]
    fn posterior_mean_is_monotone_in_observation(t in 0.05f64..0.95, x in -3.0f64..3.0) {
        // For a 1-d target the posterior mean is increasing in the observation.
        let target = GaussianMixtureTarget::scalar(&[(0.5, -1.0, 0.3), (0.5, 1.0, 0.3)], 0.0).unwrap();
        let s = Schedule::linear_linear();
        let lo = posterior_mean(&target, &s, t, &[x]).unwrap()[0];
        let hi = posterior_mean(&target, &s, t, &[x + 1e-3]).unwrap()[0];
        prop_assert!(hi >= lo);
    }
}
