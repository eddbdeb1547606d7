//! Integrating-factor data of the linear reference SDE `dY = a_t Y dt + g_t dW`.
//!
//! With `ℓ(t) = −∫_t^1 a_u du` (so that `e^{ℓ(t)} = r_t / r_1`) and
//! `J_t = ∫_0^t g_u² e^{−2ℓ(u)} du`, the reference process satisfies
//! `Var(Y_t) = e^{2ℓ(t)} J_t` per dimension, `ε = J_1`, and
//! `h_t = e^{2ℓ(t)} J_t / J_1`.
//!
//! The bridge of `Y` pinned at `Y_1 = x★` is
//! `x_t = s_t (K_t x★ + √(ε K_t (1 − K_t)) z)` with `s_t = e^{ℓ(t)}` and
//! `K_t = J_t / J_1`; when `a ≡ 0` this is `h_t x★ + √(ε h_t (1 − h_t)) z`.
//!
//! Values are tabulated on a uniform node grid and refined between nodes by
//! short adaptive integrations, so `a` may be singular (integrably or not) at
//! `t = 0`.

use std::fmt;

use crate::quadrature::{integrate, Tolerance};
use crate::ScalarFn;

use super::ScheduleError;

const NODES: usize = 512;
const DEGENERATE_EPS: f64 = 1e-10;

fn tol() -> Tolerance {
    Tolerance::new(1e-13, 1e-12).with_max_intervals(400)
}

#[derive(Clone)]
pub struct FollmerScheduleData {
    a: ScalarFn,
    g: ScalarFn,
    nodes: Vec<f64>,
    /// `ℓ` at each node; `ℓ(0)` may be `±∞`.
    ell: Vec<f64>,
    /// `J` at each node.
    cum: Vec<f64>,
    pub eps: f64,
}

impl fmt::Debug for FollmerScheduleData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FollmerScheduleData")
            .field("eps", &self.eps)
            .field("nodes", &self.nodes.len())
            .field("log_scale_at_0", &self.ell[0])
            .finish()
    }
}

/// Tabulates `r`, `h` and `ε` for the reference process with drift rate `a`
/// and diffusion coefficient `g`.
pub fn follmer_schedule_data(
    a: ScalarFn,
    g: ScalarFn,
) -> Result<FollmerScheduleData, ScheduleError> {
    let nodes: Vec<f64> = (0..=NODES).map(|k| k as f64 / NODES as f64).collect();
    let mut ell = vec![0.0; NODES + 1];
    for k in (1..NODES).rev() {
        let seg = integrate(|u| a(u), nodes[k], nodes[k + 1], tol())?;
        if !seg.value.is_finite() {
            return Err(ScheduleError::NonFinite {
                what: "a",
                t: nodes[k],
            });
        }
        ell[k] = ell[k + 1] - seg.value;
    }
    // `a` may blow up at the origin; a failed or divergent integral on the
    // first cell means `ℓ(0) = ±∞`.
    ell[0] = match integrate(|u| a(u), 0.0, nodes[1], Tolerance::new(1e-13, 1e-12)) {
        Ok(first) if first.converged && first.value.is_finite() => ell[1] - first.value,
        Ok(first) if first.value > 0.0 => f64::NEG_INFINITY,
        _ => f64::INFINITY,
    };

    let mut data = FollmerScheduleData {
        a,
        g,
        nodes,
        ell,
        cum: vec![0.0; NODES + 1],
        eps: 0.0,
    };
    for k in 1..=NODES {
        let (lo, hi) = (data.nodes[k - 1], data.nodes[k]);
        let seg = integrate(|u| data.j_integrand(u), lo, hi, tol())?;
        if !seg.value.is_finite() {
            return Err(ScheduleError::NonFinite { what: "g", t: lo });
        }
        data.cum[k] = data.cum[k - 1] + seg.value;
    }
    data.eps = data.cum[NODES];
    if !(data.eps > DEGENERATE_EPS) {
        return Err(ScheduleError::DegenerateReference { eps: data.eps });
    }
    Ok(data)
}

impl FollmerScheduleData {
    fn j_integrand(&self, u: f64) -> f64 {
        let g = (self.g)(u);
        let w = (-2.0 * self.log_scale(u)).exp();
        if w == 0.0 || !g.is_finite() {
            0.0
        } else {
            g * g * w
        }
    }

    fn node_index(&self, t: f64) -> usize {
        ((t * NODES as f64).floor() as usize).min(NODES)
    }

    pub fn a(&self, t: f64) -> f64 {
        (self.a)(t)
    }

    pub fn g(&self, t: f64) -> f64 {
        (self.g)(t)
    }

    /// `ℓ(t) = log(r_t / r_1)`.
    pub fn log_scale(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let k = self.node_index(t);
        if self.nodes[k] == t {
            return self.ell[k];
        }
        let up = k + 1;
        match integrate(|u| (self.a)(u), t, self.nodes[up], tol()) {
            Ok(seg) if seg.value.is_finite() => self.ell[up] - seg.value,
            // Only reachable next to a singular origin.
            _ => self.ell[0],
        }
    }

    /// `s_t = r_t / r_1`, the factor mapping the time-1 scale to time `t`.
    pub fn bridge_scale(&self, t: f64) -> f64 {
        self.log_scale(t).exp()
    }

    /// `J_t = ∫_0^t g_u² (r_1 / r_u)² du`.
    pub fn cumulative(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let k = self.node_index(t);
        if self.nodes[k] == t {
            return self.cum[k];
        }
        match integrate(|u| self.j_integrand(u), self.nodes[k], t, tol()) {
            Ok(seg) => self.cum[k] + seg.value,
            Err(_) => self.cum[k],
        }
    }

    /// `K_t = J_t / J_1 ∈ [0, 1]`.
    pub fn bridge_fraction(&self, t: f64) -> f64 {
        (self.cumulative(t) / self.eps).clamp(0.0, 1.0)
    }

    /// Integrating factor `r_t = exp(∫_0^t a_u du)`. When `∫_0 a` diverges
    /// the factor is reported relative to `r_1` instead.
    pub fn r(&self, t: f64) -> f64 {
        let l0 = self.ell[0];
        if l0.is_finite() {
            (self.log_scale(t) - l0).exp()
        } else {
            self.bridge_scale(t)
        }
    }

    /// `h_t = (1/ε) ∫_0^t (r_t / r_u)² g_u² du`.
    pub fn h(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let s = self.bridge_scale(t);
        s * s * self.bridge_fraction(t)
    }

    /// Per-dimension variance of the reference process at time `t`.
    pub fn reference_variance(&self, t: f64) -> f64 {
        self.eps * self.h(t)
    }

    /// Everything needed to evaluate the bridge at a fixed time.
    pub fn bridge_at(&self, t: f64) -> BridgeCoefficients {
        let s = self.bridge_scale(t);
        let k = self.bridge_fraction(t);
        BridgeCoefficients {
            t,
            scale: s,
            fraction: k,
            eps: self.eps,
            a: self.a(t),
            g: self.g(t),
        }
    }
}

/// Bridge quantities frozen at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeCoefficients {
    pub t: f64,
    /// `s_t`.
    pub scale: f64,
    /// `K_t`.
    pub fraction: f64,
    pub eps: f64,
    pub a: f64,
    pub g: f64,
}

impl BridgeCoefficients {
    /// Observation model `x_t = obs_scale · x★ + √obs_var · z`.
    pub fn obs_scale(&self) -> f64 {
        self.scale * self.fraction
    }

    pub fn obs_var(&self) -> f64 {
        self.scale * self.scale * self.eps * self.fraction * (1.0 - self.fraction)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar_fn;
    use crate::schedule::Schedule;

    #[test]
    fn classical_follmer() {
        let d = follmer_schedule_data(scalar_fn(|_| 0.0), scalar_fn(|_| 1.0)).unwrap();
        assert!((d.eps - 1.0).abs() < 1e-12);
        for &t in &[0.0, 0.1, 0.37, 0.5, 0.999, 1.0] {
            assert!((d.h(t) - t).abs() < 1e-10, "t={t}");
            assert!((d.r(t) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_g_is_degenerate() {
        let err = follmer_schedule_data(scalar_fn(|_| 0.0), scalar_fn(|_| 0.0)).unwrap_err();
        assert!(matches!(err, ScheduleError::DegenerateReference { .. }));
    }

    #[test]
    fn linear_linear_reference_variance() {
        let s = Schedule::linear_linear();
        let d = follmer_schedule_data(s.a_ref_fn(), s.follmer_g()).unwrap();
        assert!((d.eps - 1.0).abs() < 1e-9);
        assert!((d.reference_variance(0.5) - 0.375).abs() < 1e-9);
        assert!((d.h(1.0) - 1.0).abs() < 1e-9);
        for &t in &[0.1, 0.3, 0.77] {
            let ss = 1.0 - t + t * t;
            assert!((d.bridge_scale(t) - ss).abs() < 1e-9);
            assert!((d.bridge_fraction(t) - t / ss).abs() < 1e-9);
        }
    }

    #[test]
    fn reference_variance_matches_interpolant_for_catalog() {
        for s in Schedule::catalog() {
            let d = follmer_schedule_data(s.a_ref_fn(), s.follmer_g()).unwrap();
            for &t in &[0.05, 0.25, 0.5, 0.75, 0.95] {
                let want = s.reference_variance(t);
                assert!(
                    (d.reference_variance(t) - want).abs() < 1e-7,
                    "{} t={t}: {} vs {want}",
                    s.name,
                    d.reference_variance(t)
                );
            }
        }
    }

    #[test]
    fn h_is_monotone() {
        let s = Schedule::trigonometric();
        let d = follmer_schedule_data(s.a_ref_fn(), s.follmer_g()).unwrap();
        let mut prev = 0.0;
        for k in 1..=200 {
            let h = d.h(k as f64 / 200.0);
            assert!(h >= prev - 1e-12);
            prev = h;
        }
    }
}
