//! Monte Carlo ensembles seeded from standard pairs: nearly horizontal
//! curves carrying a controlled density, evolved particle by particle under
//! the skew map while an averaged reference flow rides along to measure the
//! slow deviation Delta theta and the center deviation Delta zeta.
//!
//! Every random draw is keyed by (seed, particle, step), so the evolution is
//! reproducible bit for bit under any worker count.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::averaged::AveragedField;
use crate::center::{slope_field, ConeConstants};
use crate::circle::wrap;
use crate::rng::{dither_word, stream_rng};
use crate::system::{System, TorusPoint};

/// Nodes used to sample the pair's curve and density; the derivative bounds
/// are checked on this grid.
const PAIR_NODES: usize = 1025;

/// Reported deviation quantile levels.
pub const TRACE_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Admission constants for standard pairs. The curve slope scales with eps;
/// the density shape does not.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PairConstants {
    /// pair length ceiling; lengths live in [delta/2, delta]
    pub delta: f64,
    /// curve slope bound, |G'| <= eps c1
    pub c1: f64,
    /// density log-slope bound, |rho'/rho| <= c2
    pub c2: f64,
    /// curvature factor, |G''| <= eps d0 c1
    pub d0: f64,
    /// third-derivative factor, |G'''| <= eps d1 c1
    pub d1: f64,
    /// density log-curvature factor, |rho''/rho| <= dbar0 c2
    pub dbar0: f64,
}

impl PairConstants {
    /// Defaults sized from the system's drive norms: the slope budget covers
    /// one pushforward's slope gain four times over, and delta keeps
    /// delta * c2 well under 1/50.
    pub fn for_system(sys: &System) -> PairConstants {
        let d_omega = sys.sup_dx_omega + sys.sup_dtheta_omega;
        PairConstants {
            delta: 0.0019,
            c1: (4.0 * d_omega).max(1.0),
            c2: 10.0,
            d0: d_omega.max(2.0),
            d1: 4.0 * (1.0 + d_omega) * (1.0 + d_omega),
            dbar0: 4.0,
        }
    }
}

/// A standard pair: an interval [a, b] on the slow circle, a nearly flat
/// curve theta = G(x) over it, and a log-Lipschitz probability density.
/// Curve and density are stored sampled on a uniform grid; G is kept lifted
/// so pairs crossing the seam stay smooth.
#[derive(Clone, Debug, Serialize)]
pub struct StandardPairSpec {
    pub a: f64,
    pub b: f64,
    pub consts: PairConstants,
    g: Vec<f64>,
    rho: Vec<f64>,
    cdf: Vec<f64>,
}

fn bound_check(name: &str, worst: f64, limit: f64) -> Result<(), String> {
    // 5% slack absorbs the finite-difference truncation error
    if worst <= limit * 1.05 + 1e-9 {
        Ok(())
    } else {
        Err(format!("{name} reaches {worst:.6e}, over the admitted {limit:.6e}"))
    }
}

/// Worst |k-th difference| / (k h)^k over the interior, stride widened for
/// the higher derivatives so f64 cancellation stays below the bounds.
fn fd_sup(vals: &[f64], h: f64, order: usize, stride: usize) -> f64 {
    let n = vals.len();
    let hh = h * stride as f64;
    let mut worst = 0.0f64;
    let mut i = 2 * stride;
    while i + 2 * stride < n {
        let d = match order {
            1 => (vals[i + stride] - vals[i - stride]) / (2.0 * hh),
            2 => (vals[i + stride] - 2.0 * vals[i] + vals[i - stride]) / (hh * hh),
            3 => {
                (vals[i + 2 * stride] - 2.0 * vals[i + stride] + 2.0 * vals[i - stride]
                    - vals[i - 2 * stride])
                    / (2.0 * hh * hh * hh)
            }
            _ => unreachable!(),
        };
        worst = worst.max(d.abs());
        i += 1;
    }
    worst
}

impl StandardPairSpec {
    /// Build and validate a pair from closures. `g` must return the lifted
    /// slow coordinate (continuous across the seam); `rho` any positive
    /// shape, normalized here.
    pub fn from_fns(
        sys: &System,
        a: f64,
        b: f64,
        g: impl Fn(f64) -> f64,
        rho: impl Fn(f64) -> f64,
        consts: PairConstants,
    ) -> Result<StandardPairSpec, String> {
        let len = b - a;
        if !(len > 0.0) || !len.is_finite() {
            return Err(format!("pair needs b > a, got [{a}, {b}]"));
        }
        if len < consts.delta / 2.0 * (1.0 - 1e-9) || len > consts.delta * (1.0 + 1e-9) {
            return Err(format!(
                "pair length {len:.3e} outside [delta/2, delta] = [{:.3e}, {:.3e}]",
                consts.delta / 2.0,
                consts.delta
            ));
        }
        let h = len / (PAIR_NODES - 1) as f64;
        let gv: Vec<f64> = (0..PAIR_NODES).map(|i| g(a + i as f64 * h)).collect();
        let mut rv: Vec<f64> = (0..PAIR_NODES).map(|i| rho(a + i as f64 * h)).collect();
        if rv.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err("density must be strictly positive on [a, b]".into());
        }

        let eps = sys.epsilon;
        bound_check("|G'|", fd_sup(&gv, h, 1, 1), eps * consts.c1)?;
        bound_check("|G''|", fd_sup(&gv, h, 2, 4), eps * consts.d0 * consts.c1)?;
        bound_check("|G'''|", fd_sup(&gv, h, 3, 16), eps * consts.d1 * consts.c1)?;

        let mass: f64 = trapezoid(&rv, h);
        for v in &mut rv {
            *v /= mass;
        }
        let log_rho: Vec<f64> = rv.iter().map(|v| v.ln()).collect();
        bound_check("|rho'/rho|", fd_sup(&log_rho, h, 1, 1), consts.c2)?;
        // rho''/rho = (log rho)'' + ((log rho)')^2
        let mut worst2 = 0.0f64;
        for i in 8..PAIR_NODES - 8 {
            let d1 = (log_rho[i + 1] - log_rho[i - 1]) / (2.0 * h);
            let hh = 4.0 * h;
            let d2 = (log_rho[i + 4] - 2.0 * log_rho[i] + log_rho[i - 4]) / (hh * hh);
            worst2 = worst2.max((d2 + d1 * d1).abs());
        }
        bound_check("|rho''/rho|", worst2, consts.dbar0 * consts.c2)?;

        let mut cdf = vec![0.0; PAIR_NODES];
        for i in 1..PAIR_NODES {
            cdf[i] = cdf[i - 1] + 0.5 * h * (rv[i - 1] + rv[i]);
        }
        let total = cdf[PAIR_NODES - 1];
        for v in &mut cdf {
            *v /= total;
        }
        Ok(StandardPairSpec { a, b, consts, g: gv, rho: rv, cdf })
    }

    /// The flat pair: constant curve, uniform density.
    pub fn flat(
        sys: &System,
        theta0: f64,
        a: f64,
        b: f64,
        consts: PairConstants,
    ) -> Result<StandardPairSpec, String> {
        StandardPairSpec::from_fns(sys, a, b, |_| theta0, |_| 1.0, consts)
    }

    pub fn len(&self) -> f64 {
        self.b - self.a
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Lifted curve value at x in [a, b], linear between nodes.
    pub fn curve_at(&self, x: f64) -> f64 {
        let h = self.len() / (PAIR_NODES - 1) as f64;
        let s = ((x - self.a) / h).clamp(0.0, (PAIR_NODES - 1) as f64);
        let i = (s as usize).min(PAIR_NODES - 2);
        let t = s - i as f64;
        self.g[i] + t * (self.g[i + 1] - self.g[i])
    }

    /// Normalized density at x in [a, b], linear between nodes.
    pub fn density_at(&self, x: f64) -> f64 {
        let h = self.len() / (PAIR_NODES - 1) as f64;
        let s = ((x - self.a) / h).clamp(0.0, (PAIR_NODES - 1) as f64);
        let i = (s as usize).min(PAIR_NODES - 2);
        let t = s - i as f64;
        self.rho[i] + t * (self.rho[i + 1] - self.rho[i])
    }

    /// Inverse of the density's cumulative distribution.
    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let i = self.cdf.partition_point(|&c| c <= u).clamp(1, PAIR_NODES - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        let h = self.len() / (PAIR_NODES - 1) as f64;
        self.a + ((i - 1) as f64 + t) * h
    }

    /// The pair's mean slow coordinate, integral of G against the density.
    pub fn theta_hat(&self) -> f64 {
        let h = self.len() / (PAIR_NODES - 1) as f64;
        let gr: Vec<f64> = self.g.iter().zip(&self.rho).map(|(g, r)| g * r).collect();
        wrap(trapezoid(&gr, h))
    }
}

fn trapezoid(vals: &[f64], h: f64) -> f64 {
    let inner: f64 = vals[1..vals.len() - 1].iter().sum();
    h * (inner + 0.5 * (vals[0] + vals[vals.len() - 1]))
}

/// One particle: torus state exactly as the map sees it, plus the lifted
/// deviation bookkeeping against its own averaged reference flow.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Particle {
    pub x: f64,
    pub theta: f64,
    pub weight: f64,
    /// accumulated center exponent, eps * sum of psi before each step
    pub zeta: f64,
    /// center slope from the most recent psi evaluation
    pub s: f64,
    /// averaged flow started at this particle's own theta_0
    pub theta_ref: f64,
    pub zeta_ref: f64,
    /// lifted slow displacement of map and reference; the difference is
    /// Delta theta without any seam artifacts
    pub theta_acc: f64,
    pub ref_acc: f64,
    /// running sup of |Delta theta| over every step so far
    pub sup_abs_dtheta: f64,
}

impl Particle {
    pub fn delta_theta(&self) -> f64 {
        self.theta_acc - self.ref_acc
    }

    pub fn delta_zeta(&self) -> f64 {
        self.zeta - self.zeta_ref
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Ensemble {
    pub particles: Vec<Particle>,
    pub origin: StandardPairSpec,
    pub seed: u64,
    /// steps taken so far
    pub n: u64,
}

impl Ensemble {
    pub fn total_weight(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }

    /// Little-endian binary dump: magic "DLEN", u32 version 1, u32 field
    /// count, u64 particle count, then per particle the f64 fields
    /// x, theta, weight, zeta, s, theta_ref, zeta_ref, theta_acc, ref_acc,
    /// sup_abs_dtheta.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.particles.len() * 80);
        out.extend_from_slice(b"DLEN");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&10u32.to_le_bytes());
        out.extend_from_slice(&(self.particles.len() as u64).to_le_bytes());
        for p in &self.particles {
            for v in [
                p.x,
                p.theta,
                p.weight,
                p.zeta,
                p.s,
                p.theta_ref,
                p.zeta_ref,
                p.theta_acc,
                p.ref_acc,
                p.sup_abs_dtheta,
            ] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Draw `count` equally weighted particles from the pair: x by inverse CDF,
/// theta on the curve. Deterministic in (seed, particle index).
pub fn sample_standard_pair(
    spec: &StandardPairSpec,
    count: usize,
    seed: u64,
) -> Result<Ensemble, String> {
    if count == 0 {
        return Err("ensemble needs at least one particle".into());
    }
    let w = 1.0 / count as f64;
    let particles = (0..count)
        .into_par_iter()
        .map(|i| {
            let u: f64 = stream_rng(seed, "pair-x", i as u64).gen();
            let x = spec.quantile(u);
            let theta = wrap(spec.curve_at(x));
            Particle {
                x: wrap(x),
                theta,
                weight: w,
                zeta: 0.0,
                s: 0.0,
                theta_ref: theta,
                zeta_ref: 0.0,
                theta_acc: 0.0,
                ref_acc: 0.0,
                sup_abs_dtheta: 0.0,
            }
        })
        .collect();
    Ok(Ensemble { particles, origin: spec.clone(), seed, n: 0 })
}

/// Deviation quantiles at one recorded step.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TraceSample {
    pub step: u64,
    /// slow time, step * eps
    pub t: f64,
    /// pair-level averaged flow started at theta_hat
    pub theta_bar: f64,
    pub zeta_bar: f64,
    pub dtheta_q: [f64; 5],
    pub dzeta_q: [f64; 5],
}

#[derive(Clone, Debug, Serialize)]
pub struct TrajectoryTrace {
    pub epsilon: f64,
    pub stride: usize,
    pub theta_hat: f64,
    pub q_levels: [f64; 5],
    pub samples: Vec<TraceSample>,
}

impl TrajectoryTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,theta_bar,zeta_bar");
        for tag in ["dtheta", "dzeta"] {
            for q in self.q_levels {
                out.push_str(&format!(",{tag}_q{:02}", (q * 100.0).round() as u32));
            }
        }
        out.push_str("\r\n");
        for s in &self.samples {
            out.push_str(&format!("{},{},{}", s.t, s.theta_bar, s.zeta_bar));
            for v in s.dtheta_q.iter().chain(&s.dzeta_q) {
                out.push_str(&format!(",{v}"));
            }
            out.push_str("\r\n");
        }
        out
    }
}

/// One RK4 step of the averaged pair (theta_bar, zeta_bar): d theta/dt =
/// omega_bar, d zeta/dt = psi_bar, h in slow time. Returns the increments.
fn averaged_step(field: &AveragedField, theta: f64, h: f64) -> (f64, f64) {
    let ob = |t: f64| field.omega_bar.eval(t);
    let pb = |t: f64| field.psi_bar.eval(t);
    let k1 = ob(theta);
    let k2 = ob(theta + 0.5 * h * k1);
    let k3 = ob(theta + 0.5 * h * k2);
    let k4 = ob(theta + h * k3);
    let dth = h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    let z1 = pb(theta);
    let z2 = pb(theta + 0.5 * h * k1);
    let z3 = pb(theta + 0.5 * h * k2);
    let z4 = pb(theta + h * k3);
    let dz = h / 6.0 * (z1 + 2.0 * z2 + 2.0 * z3 + z4);
    (dth, dz)
}

fn quantiles_of(mut vals: Vec<f64>) -> [f64; 5] {
    vals.sort_unstable_by(f64::total_cmp);
    let last = vals.len() - 1;
    TRACE_QUANTILES.map(|q| vals[(q * last as f64).round() as usize])
}

/// Advance every particle n_steps, accumulating zeta through the regularized
/// center observable and carrying the averaged reference alongside, with
/// deviation quantiles recorded every `stride` steps (and at the final
/// step). `dither` adds one deterministic half-ulp bit to x per step, which
/// keeps binary-collapsing fibers like doubling on a typical orbit; switch
/// it off to reproduce the bare map composition bit for bit.
pub fn evolve(
    sys: &System,
    field: &AveragedField,
    cones: &ConeConstants,
    ens: Ensemble,
    n_steps: usize,
    stride: usize,
    dither: bool,
) -> Result<(Ensemble, TrajectoryTrace), String> {
    if n_steps == 0 {
        return Err("evolve needs at least one step".into());
    }
    if stride == 0 {
        return Err("record stride must be positive".into());
    }
    if (field.rescale - 1.0).abs() > 1e-12 {
        return Err(
            "evolve needs the averaged field in raw drive units; rescaled fields are for \
             reporting only"
                .into(),
        );
    }
    let eps = sys.epsilon;
    let seed = ens.seed;
    let n0 = ens.n;
    let sample_steps: Vec<usize> =
        (0..=n_steps).filter(|&k| k % stride == 0 || k == n_steps).collect();

    struct Run {
        particle: Particle,
        dtheta: Vec<f64>,
        dzeta: Vec<f64>,
    }

    let runs: Vec<Run> = ens
        .particles
        .par_iter()
        .enumerate()
        .map(|(idx, start)| {
            let mut p = *start;
            let mut dtheta = Vec::with_capacity(sample_steps.len());
            let mut dzeta = Vec::with_capacity(sample_steps.len());
            let mut next_sample = 0;
            for k in 0..=n_steps {
                if next_sample < sample_steps.len() && sample_steps[next_sample] == k {
                    dtheta.push(p.delta_theta());
                    dzeta.push(p.delta_zeta());
                    next_sample += 1;
                }
                if k == n_steps {
                    break;
                }
                // center observable before the step; zeta_k sums psi_{j<k}
                let q = TorusPoint::new(p.x, p.theta);
                p.s = if cones.kc == 0.0 { 0.0 } else { slope_field(sys, q, cones.n_bar) };
                p.zeta +=
                    eps * (sys.dtheta_omega(q.x, q.theta) + sys.dx_omega(q.x, q.theta) * p.s);
                // map step, arithmetic identical to System::apply
                let d = eps * sys.omega(p.x, p.theta);
                let new_theta = wrap(p.theta + d);
                let mut new_x = wrap(sys.f_lift(p.x, p.theta));
                if dither {
                    let step_index = n0 + k as u64;
                    let word = dither_word(seed, idx as u64, step_index / 64);
                    let bit = (word >> (step_index % 64)) & 1;
                    new_x += bit as f64 * f64::EPSILON * 0.5;
                    if new_x >= 1.0 {
                        new_x -= 1.0;
                    }
                }
                p.theta = new_theta;
                p.x = new_x;
                p.theta_acc += d;
                // averaged reference, one RK4 step of eps slow time
                let (dth, dz) = averaged_step(field, p.theta_ref, eps);
                p.theta_ref = wrap(p.theta_ref + dth);
                p.ref_acc += dth;
                p.zeta_ref += dz;
                p.sup_abs_dtheta = p.sup_abs_dtheta.max(p.delta_theta().abs());
            }
            Run { particle: p, dtheta, dzeta }
        })
        .collect();

    // pair-level reference from theta_hat, same integrator
    let theta_hat = ens.origin.theta_hat();
    let mut bar = (theta_hat, 0.0f64);
    let mut bars = Vec::with_capacity(sample_steps.len());
    let mut next_sample = 0;
    for k in 0..=n_steps {
        if next_sample < sample_steps.len() && sample_steps[next_sample] == k {
            bars.push(bar);
            next_sample += 1;
        }
        if k == n_steps {
            break;
        }
        let (dth, dz) = averaged_step(field, bar.0, eps);
        bar = (wrap(bar.0 + dth), bar.1 + dz);
    }

    let samples = sample_steps
        .iter()
        .enumerate()
        .map(|(si, &k)| TraceSample {
            step: n0 + k as u64,
            t: (n0 + k as u64) as f64 * eps,
            theta_bar: bars[si].0,
            zeta_bar: bars[si].1,
            dtheta_q: quantiles_of(runs.iter().map(|r| r.dtheta[si]).collect()),
            dzeta_q: quantiles_of(runs.iter().map(|r| r.dzeta[si]).collect()),
        })
        .collect();

    let evolved = Ensemble {
        particles: runs.into_iter().map(|r| r.particle).collect(),
        origin: ens.origin,
        seed,
        n: n0 + n_steps as u64,
    };
    let trace = TrajectoryTrace {
        epsilon: eps,
        stride,
        theta_hat,
        q_levels: TRACE_QUANTILES,
        samples,
    };
    Ok((evolved, trace))
}
