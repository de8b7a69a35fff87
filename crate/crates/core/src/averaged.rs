//! The slow field averaged over the fast fibers: drift, center observable,
//! and Green-Kubo variance tabulated over theta; zero classification of the
//! drift; sink and source neighborhoods; and the averaged ODE integrator.
//!
//! Tabulation is the only expensive step and parallelizes over grid points;
//! everything downstream reads the cubic interpolants.  The sink-rate
//! normalization rescales the drive so the weakest sink contracts the center
//! at unit rate; drift, center rate, and variance scale together so the
//! averaged ODE keeps consistent time units.

use rayon::prelude::*;
use serde::Serialize;

use crate::center::{cone_constants, psi};
use crate::circle::{dist, wrap, PeriodicCubic};
use crate::fiber::{averaged_drift, green_kubo, Fiber, UlamOperator};
use crate::system::{System, TorusPoint};

pub const GK_CERTIFICATE_TOL: f64 = 1e-6;

/// Tabulated slow field with cubic interpolation between the theta nodes.
#[derive(Debug, Clone)]
pub struct AveragedField {
    pub m: usize,
    pub n_fiber: usize,
    /// lookahead depth used for the center observable
    pub n_bar: usize,
    /// cumulative drive rescale applied so far (1 = raw tabulation)
    pub rescale: f64,
    pub omega_bar: PeriodicCubic,
    pub psi_bar: PeriodicCubic,
    pub sigma2: PeriodicCubic,
    /// grid indices whose Green-Kubo tail failed the truncation certificate
    pub gk_flagged: Vec<usize>,
}

struct Row {
    omega: f64,
    psi: f64,
    sigma2: f64,
    flagged: bool,
}

pub fn tabulate_field(sys: &System, m: usize, n_fiber: usize) -> Result<AveragedField, String> {
    if m < 256 {
        return Err(format!("theta grid must have at least 256 nodes, got {m}"));
    }
    let cones = cone_constants(sys, 1.0 / 16.0)?;
    let rows: Vec<Row> = if sys.fiber_is_exact_doubling() {
        // every fiber is the same doubling map: one operator serves all theta,
        // and the center observable is x-independent
        let fiber0 = Fiber::new(sys, 0.0);
        let ulam = UlamOperator::build(&fiber0, n_fiber)?;
        let rho = ulam.invariant_density()?;
        let gk = green_kubo(&fiber0, &ulam, &rho, 256);
        let flagged = gk.last_term.abs() > GK_CERTIFICATE_TOL || !gk.geometric;
        (0..m)
            .into_par_iter()
            .map(|j| {
                let theta = j as f64 / m as f64;
                let fiber = Fiber::new(sys, theta);
                Row {
                    omega: averaged_drift(&fiber, &rho),
                    psi: sys.dtheta_omega(0.0, theta),
                    sigma2: gk.sigma2,
                    flagged,
                }
            })
            .collect()
    } else {
        (0..m)
            .into_par_iter()
            .map(|j| -> Result<Row, String> {
                let theta = j as f64 / m as f64;
                let fiber = Fiber::new(sys, theta);
                let ulam = UlamOperator::build(&fiber, n_fiber)?;
                let rho = ulam.invariant_density()?;
                let gk = green_kubo(&fiber, &ulam, &rho, 256);
                let psi_avg = rho.integrate(|x| psi(sys, TorusPoint::new(x, theta), &cones));
                Ok(Row {
                    omega: averaged_drift(&fiber, &rho),
                    psi: psi_avg,
                    sigma2: gk.sigma2,
                    flagged: gk.last_term.abs() > GK_CERTIFICATE_TOL || !gk.geometric,
                })
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(AveragedField {
        m,
        n_fiber,
        n_bar: cones.n_bar,
        rescale: 1.0,
        omega_bar: PeriodicCubic::new(rows.iter().map(|r| r.omega).collect()),
        psi_bar: PeriodicCubic::new(rows.iter().map(|r| r.psi).collect()),
        sigma2: PeriodicCubic::new(rows.iter().map(|r| r.sigma2).collect()),
        gk_flagged: rows
            .iter()
            .enumerate()
            .filter_map(|(j, r)| r.flagged.then_some(j))
            .collect(),
    })
}

impl AveragedField {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta,omega_bar,psi_bar,sigma2\r\n");
        for j in 0..self.m {
            out.push_str(&format!(
                "{},{},{},{}\r\n",
                j as f64 / self.m as f64,
                self.omega_bar.samples()[j],
                self.psi_bar.samples()[j],
                self.sigma2.samples()[j]
            ));
        }
        out
    }
}

/// A zero of the averaged drift with its slope.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Zero {
    pub theta: f64,
    pub slope: f64,
    pub is_sink: bool,
}

/// Zeros of the drift, their basins, and the sink/source neighborhoods used
/// by the trajectory arguments.
#[derive(Debug, Clone, Serialize)]
pub struct ZeroClassification {
    /// all zeros sorted by theta, alternating source/sink
    pub zeros: Vec<Zero>,
    pub sinks: Vec<Zero>,
    pub sources: Vec<Zero>,
    /// forward basins: arcs from source k to source k+1, each holding sinks[k]
    pub basins: Vec<(f64, f64)>,
    /// backward basins: arcs from sink k-1 to sink k, each holding sources[k]
    pub backward_basins: Vec<(f64, f64)>,
    /// shared sink-ball radius: B(sink, r_minus) has drift slope below half
    /// the sink's and center rate below -3/4
    pub r_minus: f64,
    /// shared source-ball radius: B(source, r_plus) has drift slope above
    /// half the source's
    pub r_plus: f64,
    /// false when some sink ball admits no positive radius (raw, unnormalized
    /// center rates usually trip this; classify again after normalizing)
    pub w_ok: bool,
    pub n_z: usize,
}

pub fn classify_zeros(field: &AveragedField, tol: f64) -> Result<ZeroClassification, String> {
    let vals = field.omega_bar.samples();
    let m = vals.len();
    let mut zeros: Vec<Zero> = Vec::new();
    for j in 0..m {
        let a = vals[j];
        let b = vals[(j + 1) % m];
        let ta = j as f64 / m as f64;
        let tb = (j + 1) as f64 / m as f64;
        let theta = if a == 0.0 {
            ta
        } else if a * b < 0.0 {
            bisect_zero(&field.omega_bar, ta, tb)
        } else {
            continue;
        };
        let slope = field.omega_bar.deriv(theta);
        if slope.abs() <= tol {
            return Err(format!(
                "discrete-zeros condition violated: zero at theta = {theta} has slope {slope}"
            ));
        }
        zeros.push(Zero { theta, slope, is_sink: slope < 0.0 });
    }
    if zeros.is_empty() {
        return Err("discrete-zeros condition violated: drift has no zeros".into());
    }
    zeros.sort_by(|p, q| p.theta.partial_cmp(&q.theta).unwrap());
    if zeros.len() % 2 != 0 {
        return Err("drift zeros do not alternate; refine the theta grid".into());
    }
    let first_source = zeros
        .iter()
        .position(|z| !z.is_sink)
        .ok_or("drift has sinks but no sources; refine the theta grid")?;
    let n_z = zeros.len() / 2;
    let mut sources = Vec::with_capacity(n_z);
    let mut sinks = Vec::with_capacity(n_z);
    for k in 0..n_z {
        let src = zeros[(first_source + 2 * k) % zeros.len()];
        let snk = zeros[(first_source + 2 * k + 1) % zeros.len()];
        if src.is_sink || !snk.is_sink {
            return Err("drift zeros do not alternate; refine the theta grid".into());
        }
        sources.push(src);
        sinks.push(snk);
    }
    let basins: Vec<(f64, f64)> =
        (0..n_z).map(|k| (sources[k].theta, sources[(k + 1) % n_z].theta)).collect();
    let backward_basins: Vec<(f64, f64)> = (0..n_z)
        .map(|k| (sinks[(k + n_z - 1) % n_z].theta, sinks[k].theta))
        .collect();

    // shared radii, maximized subject to the neighborhood inequalities and to
    // staying strictly inside the basin
    let mut cap_minus = f64::INFINITY;
    let mut cap_plus = f64::INFINITY;
    for k in 0..n_z {
        cap_minus = cap_minus
            .min(dist(sinks[k].theta, sources[k].theta))
            .min(dist(sinks[k].theta, sources[(k + 1) % n_z].theta));
        cap_plus = cap_plus
            .min(dist(sources[k].theta, sinks[k].theta))
            .min(dist(sources[k].theta, sinks[(k + n_z - 1) % n_z].theta));
    }
    let sink_ok = |r: f64| {
        sinks.iter().all(|z| {
            ball_samples(z.theta, r).all(|t| {
                field.omega_bar.deriv(t) < z.slope / 2.0 && field.psi_bar.eval(t) < -0.75
            })
        })
    };
    let source_ok = |r: f64| {
        sources
            .iter()
            .all(|z| ball_samples(z.theta, r).all(|t| field.omega_bar.deriv(t) > z.slope / 2.0))
    };
    let r_minus = max_radius(0.999 * cap_minus, &sink_ok);
    let r_plus = max_radius(0.999 * cap_plus, &source_ok);
    Ok(ZeroClassification {
        zeros,
        sinks,
        sources,
        basins,
        backward_basins,
        r_minus,
        r_plus,
        w_ok: r_minus > 0.0,
        n_z,
    })
}

fn bisect_zero(curve: &PeriodicCubic, mut a: f64, mut b: f64) -> f64 {
    let mut fa = curve.eval(a);
    for _ in 0..60 {
        if b - a < 1e-12 {
            break;
        }
        let mid = 0.5 * (a + b);
        let fm = curve.eval(mid);
        if fm == 0.0 {
            return mid;
        }
        if fa * fm < 0.0 {
            b = mid;
        } else {
            a = mid;
            fa = fm;
        }
    }
    0.5 * (a + b)
}

fn ball_samples(center: f64, r: f64) -> impl Iterator<Item = f64> {
    (0..=128).map(move |i| wrap(center - r + 2.0 * r * i as f64 / 128.0))
}

/// Largest r in (0, cap] whose ball passes `ok`, by bisection; 0 when even a
/// hairline ball fails.
fn max_radius(cap: f64, ok: &dyn Fn(f64) -> bool) -> f64 {
    if !ok(1e-9) {
        return 0.0;
    }
    if ok(cap) {
        return cap;
    }
    let (mut lo, mut hi) = (1e-9, cap);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Rescale the drive so the weakest sink contracts the center at unit rate.
/// Returns the factor and the rescaled field; drift, center rate, and
/// variance scale together (the simulated map itself is untouched because
/// eps absorbs the inverse factor).
pub fn normalize_sink_rate(
    field: &AveragedField,
    class: &ZeroClassification,
) -> Result<(f64, AveragedField), String> {
    let mut worst = f64::NEG_INFINITY;
    let mut worst_theta = 0.0;
    for z in &class.sinks {
        let v = field.psi_bar.eval(z.theta);
        if v > worst {
            worst = v;
            worst_theta = z.theta;
        }
    }
    if worst >= 0.0 {
        return Err(format!(
            "sink-rate condition violated: center rate {worst} >= 0 at sink theta = {worst_theta}"
        ));
    }
    let g = -1.0 / worst;
    let scale = |c: &PeriodicCubic, f: f64| {
        PeriodicCubic::new(c.samples().iter().map(|v| v * f).collect())
    };
    Ok((
        g,
        AveragedField {
            m: field.m,
            n_fiber: field.n_fiber,
            n_bar: field.n_bar,
            rescale: field.rescale * g,
            omega_bar: scale(&field.omega_bar, g),
            psi_bar: scale(&field.psi_bar, g),
            sigma2: scale(&field.sigma2, g * g),
            gk_flagged: field.gk_flagged.clone(),
        },
    ))
}

/// Fixed-step RK4 solution of the averaged flow (theta_bar, zeta_bar).
#[derive(Debug, Clone, Serialize)]
pub struct AveragedTrajectory {
    pub h: f64,
    pub t: Vec<f64>,
    pub theta: Vec<f64>,
    pub zeta: Vec<f64>,
}

impl AveragedTrajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// state at time t (nearest sample; the step is fixed)
    pub fn at(&self, t: f64) -> (f64, f64) {
        let i = ((t / self.h).round() as usize).min(self.theta.len() - 1);
        (self.theta[i], self.zeta[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,theta,zeta\r\n");
        for i in 0..self.t.len() {
            out.push_str(&format!("{},{},{}\r\n", self.t[i], self.theta[i], self.zeta[i]));
        }
        out
    }
}

pub fn integrate_averaged(
    field: &AveragedField,
    theta0: f64,
    t_final: f64,
    h: f64,
) -> AveragedTrajectory {
    assert!(t_final > 0.0 && h > 0.0);
    let n = (t_final / h).ceil().max(1.0) as usize;
    let h = t_final / n as f64;
    let mut t = Vec::with_capacity(n + 1);
    let mut theta_out = Vec::with_capacity(n + 1);
    let mut zeta_out = Vec::with_capacity(n + 1);
    let mut theta = wrap(theta0);
    let mut zeta = 0.0;
    t.push(0.0);
    theta_out.push(theta);
    zeta_out.push(zeta);
    let f = |th: f64| (field.omega_bar.eval(th), field.psi_bar.eval(th));
    for i in 1..=n {
        let (k1t, k1z) = f(theta);
        let (k2t, k2z) = f(theta + 0.5 * h * k1t);
        let (k3t, k3z) = f(theta + 0.5 * h * k2t);
        let (k4t, k4z) = f(theta + h * k3t);
        theta = wrap(theta + h / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t));
        zeta += h / 6.0 * (k1z + 2.0 * k2z + 2.0 * k3z + k4z);
        t.push(i as f64 * h);
        theta_out.push(theta);
        zeta_out.push(zeta);
    }
    AveragedTrajectory { h, t, theta: theta_out, zeta: zeta_out }
}
