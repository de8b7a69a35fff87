//! Invariant cones and the center-direction expansion bookkeeping.
//!
//! The map is partially hyperbolic: vectors (1, eps*u) with |u| <= Ku span the
//! expanding cone, vectors (s, 1) with |s| <= Kc the center cone.  The center
//! slope obeys a backward recursion that contracts at rate sigma_c, so every
//! slope here is a finite-depth quantity with an explicit truncation
//! certificate, never an idealized limit.  The per-step center stretch is
//! 1 + eps*(d_theta omega + d_x omega * s); its regularized log-rate psi uses
//! a fixed lookahead n_bar chosen so the depth error stays below rho_reg.

use serde::Serialize;

use crate::circle::Kahan;
use crate::fiber::{Fiber, UlamOperator};
use crate::system::{System, TorusPoint};

/// Cone apertures and the regularization depth for the center observable.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConeConstants {
    /// unstable cone aperture, 2 sup|d_x omega|
    pub ku: f64,
    /// center cone aperture, 2 sup|d_theta f|
    pub kc: f64,
    /// contraction factor of the backward slope recursion; grid maximum of
    /// |d Xi^-/ds| over |s| <= kc, inflated 2% for grid resolution
    pub sigma_c: f64,
    /// slope lookahead depth: sigma_c^n_bar * 2 kc < rho_reg
    pub n_bar: usize,
    /// regularization target, must lie in (0, 1/8)
    pub rho_reg: f64,
}

pub fn cone_constants(sys: &System, rho_reg: f64) -> Result<ConeConstants, String> {
    if !(rho_reg > 0.0 && rho_reg < 0.125) {
        return Err(format!("rho_reg must lie in (0, 1/8), got {rho_reg}"));
    }
    let ku = 2.0 * sys.sup_dx_omega;
    let kc = 2.0 * sys.sup_dtheta_f;
    let sigma_c = slope_contraction(sys, kc);
    if sigma_c >= 1.0 {
        return Err(format!(
            "slope recursion is not a contraction (sigma_c = {sigma_c}); epsilon too large"
        ));
    }
    let mut n_bar = 1usize;
    if kc > 0.0 {
        let mut spread = 2.0 * kc * sigma_c;
        while spread >= rho_reg {
            n_bar += 1;
            spread *= sigma_c;
            if n_bar > 10_000 {
                return Err("slope lookahead depth exceeds 10^4; sigma_c too close to 1".into());
            }
        }
    }
    Ok(ConeConstants { ku, kc, sigma_c, n_bar, rho_reg })
}

/// log mu increments along an orbit grow at most Gamma per slow unit.
pub fn gamma_bound(sys: &System, cones: &ConeConstants) -> f64 {
    sys.sup_dtheta_omega + cones.kc * sys.sup_dx_omega
}

/// Grid maximum of |d Xi^-/ds| over the torus and |s| <= kc.  The s-dependence
/// is monotone (the denominator is affine in s), so the endpoints dominate.
fn slope_contraction(sys: &System, kc: f64) -> f64 {
    let n = 256;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let x = (i as f64 + 0.5) / n as f64;
        for j in 0..n {
            let theta = (j as f64 + 0.5) / n as f64;
            let a = sys.dx_f(x, theta);
            let b = sys.dtheta_omega(x, theta);
            let c = sys.dx_omega(x, theta);
            let d = sys.dtheta_f(x, theta);
            let num = ((1.0 + sys.epsilon * b) * a - sys.epsilon * c * d).abs();
            for s in [-kc, kc] {
                let den = a - sys.epsilon * c * s;
                worst = worst.max(num / (den * den));
            }
        }
    }
    worst * 1.02
}

/// One backward step of the slope recursion at p.
#[inline]
fn xi_minus(sys: &System, p: TorusPoint, s_next: f64) -> f64 {
    let a = sys.dx_f(p.x, p.theta);
    let b = sys.dtheta_omega(p.x, p.theta);
    let c = sys.dx_omega(p.x, p.theta);
    let d = sys.dtheta_f(p.x, p.theta);
    ((1.0 + sys.epsilon * b) * s_next - d) / (a - sys.epsilon * c * s_next)
}

/// One forward step of the expanding-cone slope at p.
#[inline]
fn xi_plus(sys: &System, p: TorusPoint, u: f64) -> f64 {
    let a = sys.dx_f(p.x, p.theta);
    let b = sys.dtheta_omega(p.x, p.theta);
    let c = sys.dx_omega(p.x, p.theta);
    let d = sys.dtheta_f(p.x, p.theta);
    (c + (1.0 + sys.epsilon * b) * u) / (a + sys.epsilon * d * u)
}

fn forward_orbit(sys: &System, p: TorusPoint, n: usize) -> Vec<TorusPoint> {
    let mut pts = Vec::with_capacity(n + 1);
    let mut q = p;
    pts.push(q);
    for _ in 0..n {
        q = sys.apply(q);
        pts.push(q);
    }
    pts
}

fn backward_slope(sys: &System, pts: &[TorusPoint], seed: f64) -> f64 {
    let mut s = seed;
    for q in pts.iter().rev() {
        s = xi_minus(sys, *q, s);
    }
    s
}

/// Depth-n center slope at p: forward orbit, then the backward recursion
/// seeded with 0 at the orbit tip.
pub fn slope_field(sys: &System, p: TorusPoint, n: usize) -> f64 {
    assert!(n >= 1, "slope depth must be at least 1");
    let orbit = forward_orbit(sys, p, n);
    let s = backward_slope(sys, &orbit[..n], 0.0);
    let kc = 2.0 * sys.sup_dtheta_f;
    assert!(s.abs() <= kc + 1e-9, "slope {s} left the center cone |s| <= {kc}");
    s
}

/// One-step center stretch at p with slope s.
pub fn center_expansion_step(sys: &System, p: TorusPoint, s: f64) -> f64 {
    1.0 + sys.epsilon * (sys.dtheta_omega(p.x, p.theta) + sys.dx_omega(p.x, p.theta) * s)
}

/// Regularized center observable: d_theta omega + d_x omega * s_{n_bar}.
pub fn psi(sys: &System, p: TorusPoint, cones: &ConeConstants) -> f64 {
    // d_theta f = 0 forces s = 0 at every depth, so skip the orbit work
    let s = if cones.kc == 0.0 { 0.0 } else { slope_field(sys, p, cones.n_bar) };
    sys.dtheta_omega(p.x, p.theta) + sys.dx_omega(p.x, p.theta) * s
}

/// Fiber average of psi against the invariant density of f(., theta).
pub fn psi_bar(
    sys: &System,
    theta: f64,
    n_grid: usize,
    cones: &ConeConstants,
) -> Result<f64, String> {
    let fiber = Fiber::new(sys, theta);
    let ulam = UlamOperator::build(&fiber, n_grid)?;
    let rho = ulam.invariant_density()?;
    Ok(rho.integrate(|x| psi(sys, TorusPoint::new(x, theta), cones)))
}

/// Per-step record along a center trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceStep {
    pub k: usize,
    pub point: TorusPoint,
    /// recursion slope s_{n-k} at this point; feeds mu_factor
    pub s: f64,
    /// one-step center stretch at this point
    pub mu_factor: f64,
    /// expanding-cone slope u_k carried by dF^k (1, 0)
    pub u: f64,
    /// log of the expanding stretch accumulated before this step
    pub log_nu: f64,
    /// regularized center observable at this point
    pub psi: f64,
    /// zeta_k = eps * sum_{j<k} psi_j, the value before this step
    pub zeta: f64,
}

/// Center bookkeeping along one orbit: slopes, stretch factors, psi, and the
/// running zeta sum.  log_mu is the exact log of the n-step center stretch.
#[derive(Debug, Clone, Serialize)]
pub struct CenterTrace {
    pub base: TorusPoint,
    pub horizon: usize,
    pub steps: Vec<TraceStep>,
    pub zeta_final: f64,
    pub log_mu: f64,
}

pub fn zeta_trace(
    sys: &System,
    p: TorusPoint,
    n: usize,
    cones: &ConeConstants,
) -> Result<CenterTrace, String> {
    if n > 1_000_000 {
        return Err(format!("trace horizon {n} exceeds the 10^6 cap"));
    }
    let look = if cones.kc == 0.0 { 0 } else { cones.n_bar };
    let orbit = forward_orbit(sys, p, n + look);

    // depth n-k recursion slopes in one backward sweep from the horizon tip
    let mut s_rec = vec![0.0; n];
    let mut s = 0.0;
    for k in (0..n).rev() {
        s = xi_minus(sys, orbit[k], s);
        s_rec[k] = s;
    }

    let mut steps = Vec::with_capacity(n);
    let mut zeta = Kahan::default();
    let mut log_mu = Kahan::default();
    let mut log_nu = Kahan::default();
    let mut u = 0.0f64;
    for k in 0..n {
        let q = orbit[k];
        assert!(s_rec[k].abs() <= cones.kc + 1e-9, "slope left the center cone");
        assert!(u.abs() <= cones.ku + 1e-9, "expanding slope left the cone");
        let s_reg = if look == 0 { 0.0 } else { backward_slope(sys, &orbit[k..k + look], 0.0) };
        let psi_k = sys.dtheta_omega(q.x, q.theta) + sys.dx_omega(q.x, q.theta) * s_reg;
        let mu_factor = center_expansion_step(sys, q, s_rec[k]);
        steps.push(TraceStep {
            k,
            point: q,
            s: s_rec[k],
            mu_factor,
            u,
            log_nu: log_nu.value(),
            psi: psi_k,
            zeta: zeta.value(),
        });
        zeta.add(sys.epsilon * psi_k);
        log_mu.add(mu_factor.ln());
        let a = sys.dx_f(q.x, q.theta);
        let d = sys.dtheta_f(q.x, q.theta);
        log_nu.add((a + sys.epsilon * d * u).ln());
        u = xi_plus(sys, q, u);
    }
    Ok(CenterTrace {
        base: p,
        horizon: n,
        steps,
        zeta_final: zeta.value(),
        log_mu: log_mu.value(),
    })
}

impl CenterTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,x,theta,s,mu_factor,psi,zeta\r\n");
        for st in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\r\n",
                st.k, st.point.x, st.point.theta, st.s, st.mu_factor, st.psi, st.zeta
            ));
        }
        out
    }
}
