//! Coupling machinery for pairs of standard pairs: pushforward
//! disintegration into standard children, the n-step holonomy map between
//! stacked curves, its regularity diagnostics, and the mass-splitting
//! coupling step that trades a controlled mass fraction for an exactly
//! matched remainder. A demo driver iterates the step near a sink and
//! records the geometric decay of the matched distance.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::center::{cone_constants, slope_field, zeta_trace};
use crate::circle::{dist, signed_delta, wrap};
use crate::ensemble::{PairConstants, StandardPairSpec};
use crate::fiber::Fiber;
use crate::rng::stream_rng;
use crate::stats::Cloud;
use crate::system::{Family, System, TorusPoint};

/// Polynomial degree of every fitted curve and density.
pub const CHEB_DEGREE: usize = 32;
/// Slow-time window one coupling step may span.
pub const T_COUPLING: f64 = 4.0;
/// Ceiling on the defining-identity defect of a holonomy table.
pub const IDENTITY_TOL: f64 = 1e-9;
/// Steps per pushforward a density over its log-slope bound by a factor
/// gamma needs before it fits the bound again; fitted once on a doubling
/// sweep over gamma in {2, 4, 8, 16} and frozen.
pub const RECOVERY_LOG_FACTOR: f64 = 3.0;
/// Drives above this make the slow motion too coarse for curve fits.
const EPS_MAX: f64 = 0.05;
/// Regularization depth fed to the cone constants.
const RHO_REG: f64 = 1.0 / 32.0;
/// Residual floor for the Newton inversions.
const NEWTON_TOL: f64 = 1e-13;
/// Itinerary relaxation sweeps allowed before giving up.
const MAX_SWEEPS: usize = 400;
/// Rows in a holonomy table.
const TABLE_SAMPLES: usize = 33;
/// Scan resolution for sup bounds on fitted functions.
const SCAN: usize = 257;
/// Matched-sample rows reported by a coupling step.
const MATCHED_SAMPLES: usize = 17;

// ---------------------------------------------------------------------------
// Chebyshev fits

/// Chebyshev interpolant on [a, b]; coefficients are plain-sum, so
/// eval is c_0 T_0 + c_1 T_1 + ...
#[derive(Clone, Debug, Serialize)]
pub struct Cheb {
    pub a: f64,
    pub b: f64,
    pub c: Vec<f64>,
}

impl Cheb {
    /// Gauss-Lobatto node j of n+1, descending from b to a.
    fn node(a: f64, b: f64, j: usize, n: usize) -> f64 {
        let t = (std::f64::consts::PI * j as f64 / n as f64).cos();
        0.5 * (a + b) + 0.5 * (b - a) * t
    }

    pub fn fit(a: f64, b: f64, f: impl Fn(f64) -> f64) -> Cheb {
        let vals: Vec<f64> = (0..=CHEB_DEGREE).map(|j| f(Cheb::node(a, b, j, CHEB_DEGREE))).collect();
        Cheb::fit_vals(a, b, &vals)
    }

    /// Fit from values at the Gauss-Lobatto nodes, in node order.
    pub fn fit_vals(a: f64, b: f64, vals: &[f64]) -> Cheb {
        assert!(b > a && vals.len() == CHEB_DEGREE + 1);
        let n = CHEB_DEGREE;
        let mut c = vec![0.0; n + 1];
        for (k, ck) in c.iter_mut().enumerate() {
            let mut s = 0.5 * (vals[0] + if k % 2 == 0 { vals[n] } else { -vals[n] });
            for (j, v) in vals.iter().enumerate().take(n).skip(1) {
                s += v * (std::f64::consts::PI * (j * k) as f64 / n as f64).cos();
            }
            *ck = 2.0 * s / n as f64;
        }
        c[0] *= 0.5;
        c[n] *= 0.5;
        Cheb { a, b, c }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let t = (2.0 * x - self.a - self.b) / (self.b - self.a);
        let (mut b1, mut b2) = (0.0, 0.0);
        for k in (1..self.c.len()).rev() {
            let bk = self.c[k] + 2.0 * t * b1 - b2;
            b2 = b1;
            b1 = bk;
        }
        t * b1 - b2 + self.c[0]
    }

    pub fn deriv(&self) -> Cheb {
        let n = self.c.len() - 1;
        let mut d = vec![0.0; n.max(1)];
        if n >= 1 {
            d[n - 1] = 2.0 * n as f64 * self.c[n];
            for k in (1..n).rev() {
                let up = if k + 1 < n { d[k + 1] } else { 0.0 };
                d[k - 1] = up + 2.0 * k as f64 * self.c[k];
            }
            d[0] *= 0.5;
        }
        let scale = 2.0 / (self.b - self.a);
        for v in &mut d {
            *v *= scale;
        }
        Cheb { a: self.a, b: self.b, c: d }
    }

    /// Antiderivative vanishing at a.
    pub fn antideriv(&self) -> Cheb {
        let n = self.c.len() - 1;
        let get = |k: usize| if k <= n { self.c[k] } else { 0.0 };
        let mut ci = vec![0.0; n + 2];
        for k in 1..=n + 1 {
            ci[k] = (get(k - 1) - get(k + 1)) / (2.0 * k as f64);
        }
        let scale = 0.5 * (self.b - self.a);
        for v in ci.iter_mut().skip(1) {
            *v *= scale;
        }
        let mut at_a = 0.0;
        for (k, v) in ci.iter().enumerate().skip(1) {
            at_a += if k % 2 == 0 { *v } else { -*v };
        }
        ci[0] = -at_a;
        Cheb { a: self.a, b: self.b, c: ci }
    }

    pub fn integral(&self) -> f64 {
        self.antideriv().eval(self.b)
    }

    pub fn sup_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..SCAN {
            let x = self.a + (self.b - self.a) * i as f64 / (SCAN - 1) as f64;
            m = m.max(self.eval(x).abs());
        }
        m
    }

    /// a + scale * (other - self), defined on the shared interval.
    fn affine_toward(&self, other: &Cheb, scale: f64) -> Cheb {
        assert!(self.a == other.a && self.b == other.b);
        let c = self
            .c
            .iter()
            .zip(&other.c)
            .map(|(s, o)| s + scale * (o - s))
            .collect();
        Cheb { a: self.a, b: self.b, c }
    }
}

/// Solve f(x) = y on [lo, hi] for increasing f; Newton with bisection
/// fallback, iterated to residual stagnation.
fn newton_bisect(f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64, y: f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut x = 0.5 * (lo + hi);
    for _ in 0..100 {
        let r = f(x) - y;
        if r.abs() < NEWTON_TOL {
            break;
        }
        if r > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let d = df(x);
        let step = if d > 0.0 { r / d } else { f64::NAN };
        let cand = x - step;
        let next = if cand.is_finite() && cand > lo && cand < hi { cand } else { 0.5 * (lo + hi) };
        if next == x {
            break;
        }
        x = next;
    }
    x
}

// ---------------------------------------------------------------------------
// Raw pairs and the pushforward partition

/// Curve plus normalized density over [a, b], both polynomial fits and
/// free of the standard-pair admission checks. The raw form survives
/// transient bound violations that the validated form rejects.
#[derive(Clone, Debug, Serialize)]
pub struct RawPair {
    pub a: f64,
    pub b: f64,
    pub g: Cheb,
    pub rho: Cheb,
}

impl RawPair {
    pub fn new(a: f64, b: f64, g: impl Fn(f64) -> f64, rho: impl Fn(f64) -> f64) -> Result<RawPair, String> {
        if !(b > a) {
            return Err(format!("need a < b, got [{a}, {b}]"));
        }
        let g = Cheb::fit(a, b, g);
        let mut rho = Cheb::fit(a, b, rho);
        let mass = rho.antideriv().eval(b);
        if !(mass > 0.0) || !mass.is_finite() {
            return Err("density must have positive finite mass".into());
        }
        for v in &mut rho.c {
            *v /= mass;
        }
        Ok(RawPair { a, b, g, rho })
    }

    pub fn from_spec(spec: &StandardPairSpec) -> RawPair {
        RawPair::new(spec.a, spec.b, |x| spec.curve_at(x), |x| spec.density_at(x))
            .expect("stored pairs have positive density")
    }

    pub fn len(&self) -> f64 {
        self.b - self.a
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= 0.0
    }

    /// Worst admission-bound ratio and which bound attains it; ratios
    /// above 1 mean the pair is not standard yet.
    pub fn bound_excess(&self, sys: &System, consts: &PairConstants) -> (f64, String) {
        let eps = sys.epsilon;
        let dg = self.g.deriv();
        let d2g = dg.deriv();
        let d3g = d2g.deriv();
        let dr = self.rho.deriv();
        let d2r = dr.deriv();
        let (mut log1, mut log2): (f64, f64) = (0.0, 0.0);
        for i in 0..SCAN {
            let x = self.a + self.len() * i as f64 / (SCAN - 1) as f64;
            let r = self.rho.eval(x);
            if r > 0.0 {
                log1 = log1.max((dr.eval(x) / r).abs());
                log2 = log2.max((d2r.eval(x) / r).abs());
            }
        }
        let ratios = [
            (dg.sup_abs() / (eps * consts.c1), "|G'|"),
            (d2g.sup_abs() / (eps * consts.d0 * consts.c1), "|G''|"),
            (d3g.sup_abs() / (eps * consts.d1 * consts.c1), "|G'''|"),
            (log1 / consts.c2, "|rho'/rho|"),
            (log2 / (consts.dbar0 * consts.c2), "|rho''/rho|"),
        ];
        let worst = ratios.iter().cloned().fold((0.0f64, ""), |acc, r| if r.0 > acc.0 { r } else { acc });
        (worst.0, worst.1.to_string())
    }
}

fn require_coupling_family(sys: &System) -> Result<(), String> {
    if matches!(sys.family, Family::AffineNonskew { .. }) {
        return Err("affine fibers twist discontinuously across the seam; coupling needs a torus-smooth family".into());
    }
    if !(sys.epsilon > 0.0 && sys.epsilon <= EPS_MAX) {
        return Err(format!("drive must lie in (0, {EPS_MAX}], got {}", sys.epsilon));
    }
    Ok(())
}

/// Push a raw pair forward one map step and cut the image curve into
/// pieces of equal image length at most delta. Returns children with
/// their weights; weights are parent-mass differences at shared cut
/// points, so they telescope to 1 exactly.
pub fn push_raw(sys: &System, parent: &RawPair, delta: f64) -> Result<Vec<(RawPair, f64, Cheb)>, String> {
    require_coupling_family(sys)?;
    if !(delta > 0.0) {
        return Err("piece length bound must be positive".into());
    }
    let eps = sys.epsilon;
    let g = &parent.g;
    let dg = g.deriv();
    let image = |x: f64| {
        let th = wrap(g.eval(x));
        sys.f_lift(x, th)
    };
    let dimage = |x: f64| {
        let th = wrap(g.eval(x));
        sys.dx_f(x, th) + sys.dtheta_f(x, th) * dg.eval(x)
    };
    let ya = image(parent.a);
    let yb = image(parent.b);
    let span = yb - ya;
    if !(span > 0.0) {
        return Err("image curve folds; the fiber map must expand along the pair".into());
    }
    let pieces = (span / delta).ceil().max(1.0) as usize;
    let step = span / pieces as f64;

    let mut cuts = vec![parent.a; pieces + 1];
    cuts[pieces] = parent.b;
    for (i, cut) in cuts.iter_mut().enumerate().take(pieces).skip(1) {
        *cut = newton_bisect(image, dimage, ya + i as f64 * step, parent.a, parent.b);
    }
    let mass = parent.rho.antideriv();
    let total = mass.eval(parent.b);

    let mut out = Vec::with_capacity(pieces);
    for j in 0..pieces {
        let (y0, y1) = (ya + j as f64 * step, ya + (j + 1) as f64 * step);
        let (x0, x1) = (cuts[j], cuts[j + 1]);
        let weight = (mass.eval(x1) - mass.eval(x0)) / total;
        let mut pre = Vec::with_capacity(CHEB_DEGREE + 1);
        for k in 0..=CHEB_DEGREE {
            let y = Cheb::node(y0, y1, k, CHEB_DEGREE);
            pre.push(newton_bisect(image, dimage, y, x0, x1));
        }
        let branch = Cheb::fit_vals(y0, y1, &pre);
        let gj: Vec<f64> = pre
            .iter()
            .map(|&x| {
                let th = g.eval(x);
                th + eps * sys.omega(x, wrap(th))
            })
            .collect();
        let rj: Vec<f64> = pre.iter().map(|&x| parent.rho.eval(x) / dimage(x)).collect();
        let child = RawPair::new(y0, y1, |y| Cheb::fit_vals(y0, y1, &gj).eval(y), |y| {
            Cheb::fit_vals(y0, y1, &rj).eval(y)
        })?;
        // refit once from the nodal values to avoid double interpolation
        let child = RawPair {
            a: y0,
            b: y1,
            g: Cheb::fit_vals(y0, y1, &gj),
            rho: {
                let raw = Cheb::fit_vals(y0, y1, &rj);
                let m = raw.antideriv().eval(y1);
                let mut c = raw.c.clone();
                for v in &mut c {
                    *v /= m;
                }
                let _ = child;
                Cheb { a: y0, b: y1, c }
            },
        };
        out.push((child, weight, branch));
    }
    Ok(out)
}

/// One pushforward of a standard pair, disintegrated into validated
/// standard children with weights summing to 1.
#[derive(Clone, Debug, Serialize)]
pub struct PairDecomposition {
    pub parent: StandardPairSpec,
    pub children: Vec<(StandardPairSpec, f64)>,
    /// inverse branch of the image map over each child interval
    pub branches: Vec<Cheb>,
    /// parent-side cut points, including both endpoints
    pub cuts: Vec<f64>,
}

pub fn standard_pushforward(sys: &System, pair: &StandardPairSpec) -> Result<PairDecomposition, String> {
    let raw = RawPair::from_spec(pair);
    let pushed = push_raw(sys, &raw, pair.consts.delta)?;
    let mut children = Vec::with_capacity(pushed.len());
    let mut branches = Vec::with_capacity(pushed.len());
    let mut cuts = vec![pair.a];
    for (j, (child, weight, branch)) in pushed.into_iter().enumerate() {
        let spec = StandardPairSpec::from_fns(
            sys,
            child.a,
            child.b,
            |y| child.g.eval(y),
            |y| child.rho.eval(y).max(f64::MIN_POSITIVE),
            pair.consts,
        )
        .map_err(|e| format!("invariance violated for child {j}: {e}"))?;
        cuts.push(branch.eval(branch.b));
        children.push((spec, weight));
        branches.push(branch);
    }
    Ok(PairDecomposition { parent: pair.clone(), children, branches, cuts })
}

impl PairDecomposition {
    pub fn weight_sum(&self) -> f64 {
        self.children.iter().map(|c| c.1).sum()
    }

    /// Sample the disintegrated image as a weighted point cloud.
    pub fn sample_cloud(&self, count: usize, seed: u64) -> Cloud {
        let cum: Vec<f64> = self
            .children
            .iter()
            .scan(0.0, |s, c| {
                *s += c.1;
                Some(*s)
            })
            .collect();
        let w = 1.0 / count as f64;
        let pts = (0..count)
            .map(|i| {
                let mut rng = stream_rng(seed, "decomp-sample", i as u64);
                let u: f64 = rng.gen();
                let v: f64 = rng.gen();
                let j = cum.partition_point(|&c| c < u).min(self.children.len() - 1);
                let x = self.children[j].0.quantile(v);
                (wrap(x), wrap(self.children[j].0.curve_at(x)), w)
            })
            .collect();
        Cloud { pts, seed, step: 0 }
    }
}

// ---------------------------------------------------------------------------
// Holonomy

/// The n-step holonomy between two stacked curves, tabulated on the
/// shrunken common domain: h maps a base point of the lower curve to the
/// base point of the upper curve whose orbit has the same x-projection
/// after n steps.
#[derive(Clone, Debug, Serialize)]
pub struct HolonomyTable {
    pub a: f64,
    pub b: f64,
    pub curve_a: Cheb,
    pub curve_b: Cheb,
    /// stacking distance in drive units: sup(|G1-G0| + |G1'-G0'|) / eps
    pub delta: f64,
    pub n_steps: usize,
    pub s_steps: usize,
    /// domain after shrinking by twice the cone aperture per unit stacking
    pub lo: f64,
    pub hi: f64,
    pub xs: Vec<f64>,
    pub h: Vec<f64>,
    pub dh: Vec<f64>,
    /// accumulated center exponent of the lower orbit at each row
    pub zeta: Vec<f64>,
    /// vertical distance of the matched orbits at time n
    pub vdist: Vec<f64>,
    /// worst disagreement between the flow route and the itinerary route
    pub identity_defect: f64,
    pub fit: Cheb,
}

/// Solve the matching itinerary: the point y on the upper curve whose
/// orbit shares the x-projection of the given reference orbit at the
/// final step. Relaxation sweeps alternate a backward pass through
/// pinned inverse branches with a forward drift pass; the itinerary is
/// pinned to the branches nearest the reference orbit on the first pass.
/// Returns (y, vertical distance at the final step).
fn collide(sys: &System, curve_b: &Cheb, orbit: &[TorusPoint]) -> Result<(f64, f64), String> {
    let n = orbit.len() - 1;
    let eps = sys.epsilon;
    let mid = 0.5 * (curve_b.a + curve_b.b);
    let rep = |z: f64| mid + signed_delta(wrap(mid), z);
    let mut z: Vec<f64> = orbit.iter().map(|p| p.x).collect();
    let mut eta: Vec<f64> = orbit.iter().map(|p| p.theta).collect();
    let mut pins: Vec<u32> = vec![0; n];
    let mut pinned = false;
    for _ in 0..MAX_SWEEPS {
        let mut moved: f64 = 0.0;
        for k in (0..n).rev() {
            let fiber = Fiber::new(sys, eta[k]);
            let zk = if pinned {
                fiber.inv_branch(pins[k], z[k + 1])
            } else {
                let mut best = (f64::INFINITY, 0.0, 0u32);
                for br in 0..sys.degree {
                    let cand = fiber.inv_branch(br, z[k + 1]);
                    let d = dist(cand, orbit[k].x);
                    if d < best.0 {
                        best = (d, cand, br);
                    }
                }
                pins[k] = best.2;
                best.1
            };
            moved = moved.max(dist(zk, z[k]));
            z[k] = zk;
        }
        pinned = true;
        let mut th = wrap(curve_b.eval(rep(z[0])));
        for k in 0..=n {
            moved = moved.max(dist(th, eta[k]));
            eta[k] = th;
            if k < n {
                th = wrap(th + eps * sys.omega(z[k], th));
            }
        }
        if moved < 1e-14 {
            let y = rep(z[0]);
            return Ok((y, dist(eta[n], orbit[n].theta)));
        }
    }
    Err("itinerary relaxation did not converge".into())
}

fn forward_orbit(sys: &System, p0: TorusPoint, n: usize) -> Vec<TorusPoint> {
    let mut orbit = Vec::with_capacity(n + 1);
    orbit.push(p0);
    let mut p = p0;
    for _ in 0..n {
        p = sys.apply(p);
        orbit.push(p);
    }
    orbit
}

/// Integrate the holonomy flow from the lower curve to the upper one.
/// The flow parameter interpolates the curves; at each state the motion
/// is the unique first-order shift keeping the final x-projection fixed,
/// driven by the n-step backward slope field.
fn holonomy_point(
    sys: &System,
    ga: &Cheb,
    gb: &Cheb,
    dga: &Cheb,
    dgb: &Cheb,
    x: f64,
    n_steps: usize,
    s_steps: usize,
) -> Result<f64, String> {
    let rhs = |s: f64, h: f64| -> Result<f64, String> {
        let (va, vb) = (ga.eval(h), gb.eval(h));
        let gs = (1.0 - s) * va + s * vb;
        let dgs = (1.0 - s) * dga.eval(h) + s * dgb.eval(h);
        let sn = slope_field(sys, TorusPoint::new(wrap(h), wrap(gs)), n_steps);
        let denom = 1.0 - sn * dgs;
        if denom <= 0.5 {
            return Err(format!("holonomy flow degenerates: slope {sn} against curve slope {dgs}"));
        }
        Ok(sn * (vb - va) / denom)
    };
    let ds = 1.0 / s_steps as f64;
    let mut h = x;
    for i in 0..s_steps {
        let s = i as f64 * ds;
        let k1 = rhs(s, h)?;
        let k2 = rhs(s + 0.5 * ds, h + 0.5 * ds * k1)?;
        let k3 = rhs(s + 0.5 * ds, h + 0.5 * ds * k2)?;
        let k4 = rhs(s + ds, h + ds * k3)?;
        h += ds / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !(ga.a - 1e-6..=ga.b + 1e-6).contains(&h) {
            return Err("holonomy flow left the base interval".into());
        }
    }
    Ok(h)
}

/// Build the holonomy table between two curves over the same interval.
/// The flow route and the itinerary route are computed independently and
/// must agree to IDENTITY_TOL, which certifies the table.
pub fn holonomy_map(
    sys: &System,
    curve_a: &Cheb,
    curve_b: &Cheb,
    n_steps: usize,
    s_steps: usize,
) -> Result<HolonomyTable, String> {
    require_coupling_family(sys)?;
    if curve_a.a != curve_b.a || curve_a.b != curve_b.b {
        return Err("curves must share the base interval exactly".into());
    }
    if n_steps == 0 || s_steps < 4 {
        return Err("need n_steps >= 1 and s_steps >= 4".into());
    }
    let horizon = (T_COUPLING / sys.epsilon).ceil() as usize;
    if n_steps > horizon {
        return Err(format!("horizon {n_steps} exceeds the coupling window of {horizon} steps"));
    }
    let (a, b) = (curve_a.a, curve_a.b);
    let eps = sys.epsilon;
    let cones = cone_constants(sys, RHO_REG)?;
    let (dga, dgb) = (curve_a.deriv(), curve_b.deriv());
    let mut sup_c1: f64 = 0.0;
    for i in 0..SCAN {
        let x = a + (b - a) * i as f64 / (SCAN - 1) as f64;
        sup_c1 = sup_c1.max((curve_b.eval(x) - curve_a.eval(x)).abs() + (dgb.eval(x) - dga.eval(x)).abs());
    }
    let delta = sup_c1 / eps;
    let shrink = 2.0 * sup_c1 * cones.kc;
    if shrink > 0.5 * (b - a) {
        return Err(format!(
            "domain collapse: stacking shrink {shrink:.3e} exceeds half the curve length {:.3e}",
            b - a
        ));
    }
    let (lo, hi) = (a + shrink, b - shrink);

    let skew = sys.sup_dtheta_f == 0.0;
    let fit = if skew {
        // vanishing center slope makes the flow stationary: h = x
        Cheb::fit(lo, hi, |x| x)
    } else {
        let vals: Result<Vec<f64>, String> = (0..=CHEB_DEGREE)
            .into_par_iter()
            .map(|j| holonomy_point(sys, curve_a, curve_b, &dga, &dgb, Cheb::node(lo, hi, j, CHEB_DEGREE), n_steps, s_steps))
            .collect();
        Cheb::fit_vals(lo, hi, &vals?)
    };
    let dfit = fit.deriv();

    let xs: Vec<f64> = (0..TABLE_SAMPLES)
        .map(|i| lo + (hi - lo) * i as f64 / (TABLE_SAMPLES - 1) as f64)
        .collect();
    let rows: Result<Vec<(f64, f64, f64, f64, f64)>, String> = xs
        .par_iter()
        .map(|&x| {
            let h = if skew { x } else { fit.eval(x) };
            let dh = if skew { 1.0 } else { dfit.eval(x) };
            let p0 = TorusPoint::new(wrap(x), wrap(curve_a.eval(x)));
            let orbit = forward_orbit(sys, p0, n_steps);
            let zeta = zeta_trace(sys, p0, n_steps, &cones)?.zeta_final;
            let (y_itin, vdist) = collide(sys, curve_b, &orbit)?;
            Ok((h, dh, zeta, vdist, (h - y_itin).abs()))
        })
        .collect();
    let rows = rows?;
    let mut identity_defect: f64 = 0.0;
    let (mut h, mut dh, mut zeta, mut vdist) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in rows {
        if r.1 <= 0.0 {
            return Err(format!("holonomy reversed orientation: h' = {} at a table row", r.1));
        }
        h.push(r.0);
        dh.push(r.1);
        zeta.push(r.2);
        vdist.push(r.3);
        identity_defect = identity_defect.max(r.4);
    }
    if identity_defect > IDENTITY_TOL {
        return Err(format!("holonomy identity defect {identity_defect:.3e} exceeds {IDENTITY_TOL:.0e}"));
    }
    Ok(HolonomyTable {
        a,
        b,
        curve_a: curve_a.clone(),
        curve_b: curve_b.clone(),
        delta,
        n_steps,
        s_steps,
        lo,
        hi,
        xs,
        h,
        dh,
        zeta,
        vdist,
        identity_defect,
        fit,
    })
}

// ---------------------------------------------------------------------------
// Holonomy regularity

/// Stacking sweep of the log-derivative bound plus the per-row distance
/// band of one table.
#[derive(Clone, Debug, Serialize)]
pub struct RegularityReport {
    pub deltas: Vec<f64>,
    pub sup_log_dh: Vec<f64>,
    /// slope of sup|log h'| against delta, fitted through the origin;
    /// this is the measured regularity constant of the window
    pub d_slope: f64,
    pub r2: f64,
    /// extremes of vdist / (delta eps e^zeta) over the base table rows
    pub band_lo: f64,
    pub band_hi: f64,
    pub t_window: f64,
}

fn sup_log_dh(table: &HolonomyTable) -> f64 {
    table.dh.iter().fold(0.0f64, |m, &d| m.max(d.ln().abs()))
}

/// Rescale the stacking of the table's curves to each target distance and
/// refit the holonomy; checks that the log-derivative bound is linear in
/// the stacking and reports the distance-predictor band of the base table.
pub fn holonomy_regularity_check(sys: &System, table: &HolonomyTable, t_window: f64) -> Result<RegularityReport, String> {
    if table.delta <= 0.0 {
        return Err("regularity sweep needs a nonzero stacking direction".into());
    }
    let n_sweep = ((t_window / sys.epsilon).round() as usize).max(1);
    let deltas = vec![0.25, 0.5, 1.0, 2.0];
    let mut sup = Vec::with_capacity(deltas.len());
    for &d in &deltas {
        let scaled = table.curve_a.affine_toward(&table.curve_b, d / table.delta);
        let t = holonomy_map(sys, &table.curve_a, &scaled, n_sweep, table.s_steps)?;
        sup.push(sup_log_dh(&t));
    }
    let (mut sxy, mut sxx, mut sy, mut syy) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in deltas.iter().zip(&sup) {
        sxy += x * y;
        sxx += x * x;
        sy += y;
        syy += y * y;
    }
    let n = deltas.len() as f64;
    let slope = sxy / sxx;
    let ss_tot = syy - sy * sy / n;
    let ss_res: f64 = deltas.iter().zip(&sup).map(|(x, y)| (y - slope * x).powi(2)).sum();
    let degenerate = sup.iter().all(|v| v.abs() < 1e-12);
    let r2 = if degenerate || ss_tot <= 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };

    let (mut band_lo, mut band_hi) = (f64::INFINITY, 0.0f64);
    for (v, z) in table.vdist.iter().zip(&table.zeta) {
        let ratio = v / (table.delta * sys.epsilon * z.exp());
        band_lo = band_lo.min(ratio);
        band_hi = band_hi.max(ratio);
    }
    Ok(RegularityReport {
        deltas,
        sup_log_dh: sup,
        d_slope: slope,
        r2,
        band_lo,
        band_hi,
        t_window,
    })
}

// ---------------------------------------------------------------------------
// The coupling step

/// Two standard pairs over the same interval with equal densities,
/// coupled by sharing the base coordinate.
#[derive(Clone, Debug, Serialize)]
pub struct MatchedCouple {
    pub pair0: StandardPairSpec,
    pub pair1: StandardPairSpec,
    /// stacking distance in drive units
    pub delta: f64,
}

impl MatchedCouple {
    pub fn new(sys: &System, pair0: StandardPairSpec, pair1: StandardPairSpec) -> Result<MatchedCouple, String> {
        if pair0.a != pair1.a || pair0.b != pair1.b {
            return Err("matched pairs must share the base interval exactly".into());
        }
        let (a, b) = (pair0.a, pair0.b);
        let (mut dsup, mut rsup, mut rmax): (f64, f64, f64) = (0.0, 0.0, 0.0);
        let h = (b - a) / (SCAN - 1) as f64;
        for i in 0..SCAN {
            let x = a + i as f64 * h;
            rsup = rsup.max((pair0.density_at(x) - pair1.density_at(x)).abs());
            rmax = rmax.max(pair0.density_at(x));
            let dv = (pair0.curve_at(x) - pair1.curve_at(x)).abs();
            let sl = if i == 0 {
                (pair0.curve_at(x + h) - pair0.curve_at(x) - pair1.curve_at(x + h) + pair1.curve_at(x)) / h
            } else {
                (pair0.curve_at(x) - pair0.curve_at(x - h) - pair1.curve_at(x) + pair1.curve_at(x - h)) / h
            };
            dsup = dsup.max(dv + sl.abs());
        }
        if rsup > 1e-8 * rmax {
            return Err(format!("matched pairs need equal densities; sup difference {rsup:.3e}"));
        }
        Ok(MatchedCouple { pair0, pair1, delta: dsup / sys.epsilon })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct UncoupledChild {
    pub side: u8,
    /// "left-trim", "right-trim" or "transport-remainder"
    pub role: String,
    pub pair: RawPair,
    pub mass: f64,
    /// pushforwards needed before the pair meets the standard bounds again
    pub recovery_steps: u32,
}

#[derive(Clone, Debug, Serialize)]
pub struct MatchedSample {
    pub x0: f64,
    pub x1: f64,
    /// vertical distance of the matched orbits at the final step
    pub vdist: f64,
    /// first-order prediction delta eps e^zeta
    pub predictor: f64,
    pub zeta: f64,
    pub theta_end0: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CouplingStepResult {
    /// mass fraction coupled across the holonomy
    pub m_c: f64,
    /// trim coefficient: each side sheds c_star delta eps of mass
    pub c_star: f64,
    /// measured regularity constant sup|log h'| / delta of this table
    pub d_measured: f64,
    /// sup of the transported density against its channel, times the
    /// surviving mass fraction; must stay at most e^(2 d delta)
    pub xi_ratio: f64,
    pub coupled0: RawPair,
    pub coupled1: RawPair,
    pub uncoupled: Vec<UncoupledChild>,
    pub matched: Vec<MatchedSample>,
    /// worst per-side defect of mass accounting against 1
    pub mass_defect: f64,
    pub table: HolonomyTable,
    /// the regularity constant is measured on the same table it certifies;
    /// an external bound would need an independent window estimate
    pub d_note: String,
}

struct SplitGeometry {
    a0: f64,
    b0: f64,
    a1: f64,
    b1: f64,
}

/// Trim cut points for coefficient c: each tail holds mass c delta eps / 2.
fn split_for(
    c: f64,
    mass: &Cheb,
    table: &HolonomyTable,
    delta: f64,
    eps: f64,
    rho: &Cheb,
    drho: &Cheb,
) -> Option<SplitGeometry> {
    let (a, b) = (mass.a, mass.b);
    let tail = 0.5 * c * delta * eps;
    if 2.0 * tail >= 1.0 {
        return None;
    }
    let a0 = newton_bisect(|x| mass.eval(x), |x| rho.eval(x), tail, a, b);
    let b0 = newton_bisect(|x| mass.eval(x), |x| rho.eval(x), 1.0 - tail, a, b);
    if !(a0 < b0) || a0 < table.lo || b0 > table.hi {
        return None;
    }
    let a1 = table.fit.eval(a0);
    let b1 = table.fit.eval(b0);
    let min_trim = delta * eps;
    if a0 - a < min_trim || b - b0 < min_trim || a1 - a < min_trim || b - b1 < min_trim {
        return None;
    }
    let bound = c * delta * eps;
    if mass.eval(a1) > bound || 1.0 - mass.eval(b1) > bound {
        return None;
    }
    let _ = drho;
    Some(SplitGeometry { a0, b0, a1, b1 })
}

/// One coupling step: push both pairs n_steps, trim the tails, transport
/// the trimmed density across the holonomy, and split off the largest
/// common mass that fits under both densities. The remainder is returned
/// as uncoupled children tagged with recovery times.
pub fn coupling_step(
    sys: &System,
    couple: &MatchedCouple,
    delta: f64,
    n_steps: usize,
) -> Result<CouplingStepResult, String> {
    require_coupling_family(sys)?;
    if couple.delta > delta * (1.0 + 1e-6) {
        return Err(format!(
            "couple is stacked {:.4} wide but the step was asked for {delta}",
            couple.delta
        ));
    }
    let eps = sys.epsilon;
    let raw0 = RawPair::from_spec(&couple.pair0);
    let raw1 = RawPair::from_spec(&couple.pair1);
    let table = holonomy_map(sys, &raw0.g, &raw1.g, n_steps, 32)?;
    let d_measured = if table.delta > 0.0 { sup_log_dh(&table) / table.delta } else { 0.0 };

    let rho = &raw0.rho;
    let drho = rho.deriv();
    let mass = rho.antideriv();
    let norm = mass.eval(raw0.b);
    let mass = {
        let mut c = mass.c.clone();
        for v in &mut c {
            *v /= norm;
        }
        Cheb { a: mass.a, b: mass.b, c }
    };

    // smallest feasible trim coefficient, found by doubling then bisection
    let feasible = |c: f64| split_for(c, &mass, &table, delta, eps, rho, &drho).is_some();
    let mut hi_c = 1.0;
    while !feasible(hi_c) {
        hi_c *= 2.0;
        if hi_c * delta * eps > 2.0 {
            return Err("split infeasible: no trim coefficient satisfies the window and length constraints".into());
        }
    }
    let mut lo_c = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo_c + hi_c);
        if feasible(mid) {
            hi_c = mid;
        } else {
            lo_c = mid;
        }
    }
    let c_star = hi_c;
    let geom = split_for(c_star, &mass, &table, delta, eps, rho, &drho)
        .ok_or("split infeasible at the bisected coefficient")?;
    let SplitGeometry { a0, b0, a1, b1 } = geom;
    let (a, b) = (raw0.a, raw0.b);

    let m_l0 = mass.eval(a0);
    let m_r0 = 1.0 - mass.eval(b0);
    let m0s = mass.eval(b0) - mass.eval(a0);
    let m_l1 = mass.eval(a1);
    let m_r1 = 1.0 - mass.eval(b1);
    let m1s = mass.eval(b1) - mass.eval(a1);
    let m_c = m0s * (-4.0 * d_measured * delta).exp();

    // transported density: rho0/m0s carried through the holonomy
    let dfit = table.fit.deriv();
    let skew = sys.sup_dtheta_f == 0.0;
    let inv_h = |y: f64| {
        if skew {
            y
        } else {
            newton_bisect(|x| table.fit.eval(x), |x| dfit.eval(x), y, table.lo, table.hi)
        }
    };
    let rho1_cp = Cheb::fit(a1, b1, |y| {
        let x0 = inv_h(y);
        let dh = if skew { 1.0 } else { dfit.eval(x0) };
        rho.eval(x0) / (norm * m0s * dh)
    });

    let mut xi_ratio: f64 = 0.0;
    let mut worst_over: f64 = 0.0;
    for i in 0..SCAN {
        let y = a1 + (b1 - a1) * i as f64 / (SCAN - 1) as f64;
        let target = rho.eval(y) / norm;
        xi_ratio = xi_ratio.max(m0s * rho1_cp.eval(y) / target);
        worst_over = worst_over.max(m_c * rho1_cp.eval(y) - target);
    }
    let xi_bound = (2.0 * d_measured * delta).exp();
    if xi_ratio > xi_bound * (1.0 + 1e-6) {
        return Err(format!(
            "split infeasible: transported density ratio {xi_ratio:.6} exceeds e^(2 D delta) = {xi_bound:.6}"
        ));
    }
    if worst_over > 1e-12 * rho.sup_abs() / norm {
        return Err(format!("split infeasible: coupled channel overfills its density by {worst_over:.3e}"));
    }

    let consts = couple.pair0.consts;
    let lambda_eff = (sys.lambda - eps * consts.c1 * sys.sup_dtheta_f).max(1.5);
    let recovery = |pair: &RawPair| -> u32 {
        let short = if pair.len() < 0.5 * consts.delta {
            ((consts.delta / (2.0 * pair.len())).ln() / lambda_eff.ln()).ceil() as u32
        } else {
            0
        };
        let (gamma, _) = pair.bound_excess(sys, &consts);
        let over = if gamma > 1.0 { (RECOVERY_LOG_FACTOR * gamma.ln()).ceil() as u32 } else { 0 };
        short.max(over)
    };
    let restrict = |g: &Cheb, lo: f64, hi: f64, m: f64| -> Result<RawPair, String> {
        RawPair::new(lo, hi, |x| g.eval(x), |x| rho.eval(x) / (norm * m))
    };
    let mut uncoupled = Vec::new();
    let mut push_child = |side: u8, role: &str, pair: RawPair, m: f64| {
        if m > 1e-14 {
            let recovery_steps = recovery(&pair);
            uncoupled.push(UncoupledChild { side, role: role.into(), pair, mass: m, recovery_steps });
        }
    };
    push_child(0, "left-trim", restrict(&raw0.g, a, a0, m_l0)?, m_l0);
    push_child(0, "right-trim", restrict(&raw0.g, b0, b, m_r0)?, m_r0);
    push_child(0, "transport-remainder", restrict(&raw0.g, a0, b0, m0s)?, m0s - m_c);
    push_child(1, "left-trim", restrict(&raw1.g, a, a1, m_l1)?, m_l1);
    push_child(1, "right-trim", restrict(&raw1.g, b1, b, m_r1)?, m_r1);
    if m1s - m_c > 1e-14 {
        let leftover = RawPair::new(a1, b1, |x| raw1.g.eval(x), |x| {
            (rho.eval(x) / norm - m_c * rho1_cp.eval(x)).max(f64::MIN_POSITIVE) / (m1s - m_c)
        })?;
        let recovery_steps = recovery(&leftover);
        uncoupled.push(UncoupledChild {
            side: 1,
            role: "transport-remainder".into(),
            pair: leftover,
            mass: m1s - m_c,
            recovery_steps,
        });
    }

    let coupled0 = RawPair::new(a0, b0, |x| raw0.g.eval(x), |x| rho.eval(x) / (norm * m0s))?;
    let coupled1 = RawPair::new(a1, b1, |x| raw1.g.eval(x), |x| rho1_cp.eval(x).max(f64::MIN_POSITIVE))?;

    let cones = cone_constants(sys, RHO_REG)?;
    let matched: Result<Vec<MatchedSample>, String> = (0..MATCHED_SAMPLES)
        .into_par_iter()
        .map(|i| {
            let x0 = a0 + (b0 - a0) * i as f64 / (MATCHED_SAMPLES - 1) as f64;
            let x1 = if skew { x0 } else { table.fit.eval(x0) };
            let p0 = TorusPoint::new(wrap(x0), wrap(raw0.g.eval(x0)));
            let orbit = forward_orbit(sys, p0, n_steps);
            let zeta = zeta_trace(sys, p0, n_steps, &cones)?.zeta_final;
            let (_, vdist) = collide(sys, &raw1.g, &orbit)?;
            Ok(MatchedSample {
                x0,
                x1,
                vdist,
                predictor: delta * eps * zeta.exp(),
                zeta,
                theta_end0: orbit[n_steps].theta,
            })
        })
        .collect();
    let matched = matched?;

    let side_sum = |side: u8| -> f64 {
        m_c + uncoupled.iter().filter(|u| u.side == side).map(|u| u.mass).sum::<f64>()
    };
    let mass_defect = (side_sum(0) - 1.0).abs().max((side_sum(1) - 1.0).abs());

    Ok(CouplingStepResult {
        m_c,
        c_star,
        d_measured,
        xi_ratio,
        coupled0,
        coupled1,
        uncoupled,
        matched,
        mass_defect,
        table,
        d_note: "regularity constant measured on the certified table itself, not an a priori bound".into(),
    })
}

// ---------------------------------------------------------------------------
// Contraction window checks

/// Empirical checks that a coupling window of length t_c around a sink
/// contracts: the averaged flow pulls the trapping ball into its inner
/// half, the averaged center rate stays below -5/8 on the slightly
/// inflated ball, and most fiber orbits accumulate center exponent at
/// most -(9/16) t_c while ending well inside the ball.
#[derive(Clone, Debug, Serialize)]
pub struct ContractionWindowReport {
    pub t_c: f64,
    pub sink_theta: f64,
    pub r_minus: f64,
    /// r_minus/2 minus the worst flow endpoint distance; negative flags
    pub flow_margin: f64,
    /// -5/8 minus the largest center rate on the inflated ball
    pub psi_margin: f64,
    /// 0.9-quantile of the accumulated center exponent over fiber starts
    pub zeta_quantile: f64,
    /// fraction of starts with zeta <= -(9/16) t_c that also land in the
    /// three-quarter ball
    pub good_fraction: f64,
    pub flags: Vec<String>,
}

pub fn contraction_window_check(sys: &System, t_c: f64) -> Result<ContractionWindowReport, String> {
    require_coupling_family(sys)?;
    if !(t_c > 0.0) {
        return Err("window length must be positive".into());
    }
    let field = crate::averaged::tabulate_field(sys, 256, 1024)?;
    let class = crate::averaged::classify_zeros(&field, 1e-6)?;
    let sink = class
        .sinks
        .first()
        .ok_or("contraction window needs at least one averaged sink")?;
    let r = class.r_minus;
    let mut flags = Vec::new();

    let mut worst_end: f64 = 0.0;
    for side in [-1.0, 1.0] {
        let traj = crate::averaged::integrate_averaged(&field, sink.theta + side * r, t_c, t_c / 400.0);
        worst_end = worst_end.max(dist(*traj.theta.last().unwrap(), sink.theta));
    }
    let flow_margin = 0.5 * r - worst_end;
    if flow_margin < 0.0 {
        flags.push(format!(
            "averaged flow ends {worst_end:.4} from the sink, outside the half ball {:.4}",
            0.5 * r
        ));
    }

    let mut psi_max = f64::NEG_INFINITY;
    for i in 0..=64 {
        let th = sink.theta + 1.25 * r * (2.0 * i as f64 / 64.0 - 1.0);
        psi_max = psi_max.max(field.psi_bar.eval(th));
    }
    let psi_margin = -0.625 - psi_max;
    if psi_margin < 0.0 {
        flags.push(format!("center rate reaches {psi_max:.4} on the inflated ball, above -5/8"));
    }

    let n_c = ((t_c / sys.epsilon).round() as usize).max(1);
    let cones = cone_constants(sys, RHO_REG)?;
    let starts = 48;
    let traces: Result<Vec<(f64, f64)>, String> = (0..starts)
        .into_par_iter()
        .map(|i| {
            let p = TorusPoint::new((i as f64 + 0.5) / starts as f64, sink.theta);
            let tr = zeta_trace(sys, p, n_c, &cones)?;
            let end = sys.apply_n(p, n_c);
            Ok((tr.zeta_final, dist(end.theta, sink.theta)))
        })
        .collect();
    let traces = traces?;
    let mut zetas: Vec<f64> = traces.iter().map(|t| t.0).collect();
    zetas.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let zeta_quantile = zetas[((0.9 * starts as f64).ceil() as usize - 1).min(starts - 1)];
    let thresh = -9.0 / 16.0 * t_c;
    let good = traces.iter().filter(|t| t.0 <= thresh && t.1 <= 0.75 * r).count();
    let good_fraction = good as f64 / starts as f64;
    if good_fraction < 0.9 {
        flags.push(format!(
            "only {:.0}% of fiber starts contract past -(9/16) t_c inside the three-quarter ball",
            100.0 * good_fraction
        ));
    }

    Ok(ContractionWindowReport {
        t_c,
        sink_theta: sink.theta,
        r_minus: r,
        flow_margin,
        psi_margin,
        zeta_quantile,
        good_fraction,
        flags,
    })
}

// ---------------------------------------------------------------------------
// Iterated coupling demo

#[derive(Clone, Debug, Serialize)]
pub struct CouplingDemoRound {
    pub round: usize,
    pub delta: f64,
    pub c_star: f64,
    pub m_c: f64,
    /// product of coupled fractions up to this round
    pub survival: f64,
    pub median_dist: f64,
    pub median_predictor: f64,
    pub median_zeta: f64,
    /// median matched distance over the stacking distance delta eps
    pub contraction: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CouplingDemoReport {
    pub theta0: f64,
    pub t_per_round: f64,
    pub n_steps_per_round: usize,
    pub rounds: Vec<CouplingDemoRound>,
    pub window: ContractionWindowReport,
    pub note: String,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|x, y| x.partial_cmp(y).unwrap());
    v[v.len() / 2]
}

/// Iterate the coupling step on one couple near a sink. Each round
/// couples a mass fraction, measures the new matched distance, and
/// rebuilds the survivors as a freshly stacked flat couple at the median
/// endpoint. Distances should decay like e^(-t) per round of length t.
pub fn coupling_demo(
    sys: &System,
    theta0: f64,
    delta0: f64,
    t_per_round: f64,
    rounds: usize,
) -> Result<CouplingDemoReport, String> {
    require_coupling_family(sys)?;
    let consts = PairConstants::for_system(sys);
    let n_steps = ((t_per_round / sys.epsilon).round() as usize).max(1);
    let (a, b) = (0.4, 0.4 + consts.delta);
    let mut theta = wrap(theta0);
    let mut delta = delta0;
    let mut survival = 1.0;
    let mut out = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let pair0 = StandardPairSpec::flat(sys, theta, a, b, consts)?;
        let pair1 = StandardPairSpec::flat(sys, theta + delta * sys.epsilon, a, b, consts)?;
        let couple = MatchedCouple::new(sys, pair0, pair1)?;
        let step = coupling_step(sys, &couple, delta, n_steps)?;
        let mut dists: Vec<f64> = step.matched.iter().map(|m| m.vdist).collect();
        let mut preds: Vec<f64> = step.matched.iter().map(|m| m.predictor).collect();
        let mut zetas: Vec<f64> = step.matched.iter().map(|m| m.zeta).collect();
        let mut ends: Vec<f64> = step.matched.iter().map(|m| m.theta_end0).collect();
        let med = median(&mut dists);
        survival *= step.m_c;
        out.push(CouplingDemoRound {
            round,
            delta,
            c_star: step.c_star,
            m_c: step.m_c,
            survival,
            median_dist: med,
            median_predictor: median(&mut preds),
            median_zeta: median(&mut zetas),
            contraction: med / (delta * sys.epsilon),
        });
        theta = median(&mut ends);
        delta = med / sys.epsilon;
        if delta * sys.epsilon < 1e-11 {
            break;
        }
    }
    let window = contraction_window_check(sys, T_COUPLING)?;
    Ok(CouplingDemoReport {
        theta0: wrap(theta0),
        t_per_round,
        n_steps_per_round: n_steps,
        rounds: out,
        window,
        note: "single couple iterated in place; survivors are rebuilt as flat stacked pairs each round".into(),
    })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::sample_standard_pair;
    use crate::stats::{wasserstein_vertical, WASSERSTEIN_X_BINS};
    use crate::system::{BarShape, Family, HatShape};

    fn one_sink(eps: f64) -> System {
        System::new(Family::one_sink(), eps)
    }

    fn nonexample(eps: f64) -> System {
        System::new(Family::nonexample(5, 0.05, 0.02), eps)
    }

    #[test]
    fn cheb_fits_reproduce_smooth_functions() {
        let f = Cheb::fit(0.2, 0.9, |x| (3.0 * x).sin());
        let df = f.deriv();
        let fint = f.antideriv();
        for i in 0..=40 {
            let x = 0.2 + 0.7 * i as f64 / 40.0;
            assert!((f.eval(x) - (3.0 * x).sin()).abs() < 1e-12);
            assert!((df.eval(x) - 3.0 * (3.0 * x).cos()).abs() < 1e-9);
            let exact = ((0.6f64).cos() - (3.0 * x).cos()) / 3.0;
            assert!((fint.eval(x) - exact).abs() < 1e-12);
        }
        let y = newton_bisect(|x| f.eval(x), |x| df.eval(x), (3.0 * 0.4f64).sin(), 0.2, 0.5);
        assert!((y - 0.4).abs() < 1e-11);
    }

    #[test]
    fn doubling_pushforward_splits_into_halved_children() {
        let sys = one_sink(1e-3);
        let consts = PairConstants::for_system(&sys);
        let pair = StandardPairSpec::flat(&sys, 0.37, 0.2, 0.2 + consts.delta, consts).unwrap();
        let dec = standard_pushforward(&sys, &pair).unwrap();
        assert!(dec.children.len() == 2 || dec.children.len() == 3);
        assert!((dec.weight_sum() - 1.0).abs() < 1e-10);
        for ((child, w), branch) in dec.children.iter().zip(&dec.branches) {
            // doubling halves lengths, so weights match preimage share
            let expect = (child.b - child.a) / (2.0 * consts.delta * pair.consts.delta / consts.delta) * 0.0
                + (child.b - child.a) / 2.0 / (pair.b - pair.a);
            assert!((w - expect).abs() < 1e-4, "weight {w} vs length share {expect}");
            for i in 0..=8 {
                let y = child.a + (child.b - child.a) * i as f64 / 8.0;
                let x = branch.eval(y);
                let th = wrap(pair.curve_at(x));
                assert!((sys.f_lift(x, th) - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pushforward_weights_sum_to_one_for_random_pairs() {
        let sys = one_sink(1e-3);
        let consts = PairConstants::for_system(&sys);
        for trial in 0..100 {
            let mut rng = stream_rng(42, "push-mass", trial);
            let a: f64 = rng.gen::<f64>();
            let len = consts.delta * (0.5 + 0.5 * rng.gen::<f64>());
            let theta0: f64 = rng.gen();
            let amp = 0.2 * sys.epsilon * consts.c1 / (2.0 * std::f64::consts::PI);
            let phase: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
            let tilt = 0.4 * rng.gen::<f64>();
            let pair = StandardPairSpec::from_fns(
                &sys,
                a,
                a + len,
                |x| theta0 + amp * (std::f64::consts::TAU * (x - a) / len / 4.0 + phase).sin(),
                |x| 1.0 + tilt * (x - a) / len,
                consts,
            )
            .unwrap();
            let dec = standard_pushforward(&sys, &pair).unwrap();
            assert!((dec.weight_sum() - 1.0).abs() < 1e-10, "trial {trial}");
        }
    }

    #[test]
    fn pushforward_matches_monte_carlo_in_vertical_wasserstein() {
        let sys = one_sink(1e-3);
        let consts = PairConstants::for_system(&sys);
        let pair = StandardPairSpec::flat(&sys, 0.62, 0.55, 0.55 + consts.delta, consts).unwrap();
        let dec = standard_pushforward(&sys, &pair).unwrap();
        let n = 100_000;
        let mut mc = Cloud::from_ensemble(&sample_standard_pair(&pair, n, 901).unwrap());
        mc.advance(&sys, 1);
        let split = dec.sample_cloud(n, 902);
        let d = wasserstein_vertical(&mc, &split, WASSERSTEIN_X_BINS).unwrap();
        assert!(d < 2e-3, "wasserstein {d}");
    }

    #[test]
    fn identical_curves_give_identity_holonomy() {
        let sys = nonexample(1e-3);
        let g = Cheb::fit(0.3, 0.36, |x| 0.55 + 2e-4 * (std::f64::consts::TAU * x).sin());
        let t = holonomy_map(&sys, &g, &g, 200, 16).unwrap();
        assert_eq!(t.delta, 0.0);
        for (x, h) in t.xs.iter().zip(&t.h) {
            assert_eq!(x, h);
        }
        for dh in &t.dh {
            assert!((dh - 1.0).abs() < 1e-12);
        }
        assert!(t.identity_defect < 1e-11);
    }

    #[test]
    fn skew_holonomy_is_identity_for_any_stacking() {
        let sys = System::new(Family::two_sink_ergodic(), 0.02);
        let g0 = Cheb::fit(0.1, 0.3, |x| 0.3 + 0.001 * (std::f64::consts::TAU * x).sin());
        let g1 = Cheb::fit(0.1, 0.3, |x| 0.3 + 0.001 * (std::f64::consts::TAU * x).sin() + 2.0 * 0.02);
        let t = holonomy_map(&sys, &g0, &g1, 50, 8).unwrap();
        assert!((t.delta - 2.0).abs() < 1e-9);
        for (x, h) in t.xs.iter().zip(&t.h) {
            assert_eq!(x, h);
        }
        assert_eq!(t.identity_defect, 0.0);
        for dh in &t.dh {
            assert_eq!(*dh, 1.0);
        }
    }

    #[test]
    fn itinerary_solver_agrees_with_brute_forward_iteration() {
        // short horizons keep forward iteration accurate, giving an
        // independent check of the relaxation solver
        let sys = nonexample(1e-3);
        let g0 = Cheb::fit(0.3, 0.36, |x| 0.55 + 2e-4 * (std::f64::consts::TAU * x).sin());
        let g1 = Cheb::fit(0.3, 0.36, |x| {
            0.55 + 2e-4 * (std::f64::consts::TAU * x).sin() + 1e-3 * (0.7 + 0.2 * (std::f64::consts::TAU * x).cos())
        });
        let n = 8;
        let lift_end = |y: f64, curve: &Cheb| {
            let mut x = y;
            let mut th = wrap(curve.eval(y));
            for _ in 0..n {
                let nx = sys.f_lift(x, th);
                th = wrap(th + sys.epsilon * sys.omega(x, th));
                x = nx;
            }
            x
        };
        for i in 0..=4 {
            let x0 = 0.31 + 0.04 * i as f64 / 4.0;
            let target = lift_end(x0, &g0);
            let mut lo = 0.3;
            let mut hi = 0.36;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if lift_end(mid, &g1) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let brute = 0.5 * (lo + hi);
            let p0 = TorusPoint::new(wrap(x0), wrap(g0.eval(x0)));
            let orbit = forward_orbit(&sys, p0, n);
            let (y, _) = collide(&sys, &g1, &orbit).unwrap();
            assert!((y - brute).abs() < 1e-9, "x0 {x0}: solver {y} vs brute {brute}");
        }
    }

    fn nonexample_curves() -> (Cheb, Cheb) {
        let g0 = Cheb::fit(0.3, 0.36, |x| 0.55 + 2e-4 * (std::f64::consts::TAU * x).sin());
        let g1 = Cheb::fit(0.3, 0.36, |x| {
            0.55 + 2e-4 * (std::f64::consts::TAU * x).sin() + 1e-3 * (0.7 + 0.2 * (std::f64::consts::TAU * x).cos())
        });
        (g0, g1)
    }

    #[test]
    fn nonskew_holonomy_satisfies_the_defining_identity() {
        let sys = nonexample(1e-3);
        let (g0, g1) = nonexample_curves();
        let t = holonomy_map(&sys, &g0, &g1, 1000, 32).unwrap();
        assert!(t.identity_defect < 1e-9, "defect {}", t.identity_defect);
        assert!(t.dh.iter().all(|&d| d > 0.0));
        assert!(t.delta > 0.5 && t.delta < 5.0, "stacking {}", t.delta);
    }

    #[test]
    fn log_holonomy_slope_grows_linearly_in_the_stacking() {
        let sys = nonexample(1e-3);
        let (g0, g1) = nonexample_curves();
        let t = holonomy_map(&sys, &g0, &g1, 1000, 32).unwrap();
        let rep = holonomy_regularity_check(&sys, &t, 1.0).unwrap();
        assert!(rep.r2 >= 0.95, "r2 {}", rep.r2);
        assert!(rep.d_slope > 0.0);
        assert!(
            rep.band_lo >= (-0.1f64).exp() && rep.band_hi <= (0.1f64).exp(),
            "band [{}, {}]",
            rep.band_lo,
            rep.band_hi
        );
    }

    #[test]
    fn skew_regularity_sweep_is_flat_with_unit_band() {
        let sys = one_sink(2e-4);
        let g0 = Cheb::fit(0.4, 0.43, |x| {
            let _ = x;
            0.5
        });
        let g1 = Cheb::fit(0.4, 0.43, |x| {
            let _ = x;
            0.5 + 2e-4
        });
        let t = holonomy_map(&sys, &g0, &g1, 5000, 8).unwrap();
        let rep = holonomy_regularity_check(&sys, &t, 1.0).unwrap();
        assert_eq!(rep.d_slope, 0.0);
        assert_eq!(rep.r2, 1.0);
        assert!(rep.band_lo > 0.9 && rep.band_hi < 1.1, "band [{}, {}]", rep.band_lo, rep.band_hi);
    }

    #[test]
    fn skew_coupling_step_is_degenerate_exactly() {
        let sys = one_sink(2e-4);
        let consts = PairConstants::for_system(&sys);
        let pair0 = StandardPairSpec::flat(&sys, 0.5, 0.4, 0.4 + consts.delta, consts).unwrap();
        let pair1 = StandardPairSpec::flat(&sys, 0.5 + 2e-4, 0.4, 0.4 + consts.delta, consts).unwrap();
        let couple = MatchedCouple::new(&sys, pair0, pair1).unwrap();
        let step = coupling_step(&sys, &couple, 1.0, 5000).unwrap();
        assert_eq!(step.d_measured, 0.0);
        let m0s = 1.0 - step.c_star * sys.epsilon;
        assert!((step.m_c - m0s).abs() < 1e-9, "m_c {} vs {}", step.m_c, m0s);
        // transported channel reproduces the shared density exactly
        for i in 0..=16 {
            let y = step.coupled1.a + (step.coupled1.b - step.coupled1.a) * i as f64 / 16.0;
            let lhs = step.coupled1.rho.eval(y);
            let rhs = step.coupled0.rho.eval(y);
            assert!((lhs - rhs).abs() < 1e-8 * rhs, "transported density differs at {y}");
        }
        // no transport remainder survives; only the four trims
        assert_eq!(step.uncoupled.len(), 4);
        assert!(step.uncoupled.iter().all(|u| u.role.ends_with("-trim")));
        assert!(step.uncoupled.iter().all(|u| u.recovery_steps > 0));
        assert!(step.mass_defect < 1e-10, "defect {}", step.mass_defect);
        let mut ratio: Vec<f64> = step.matched.iter().map(|m| m.vdist / m.predictor).collect();
        let med = median(&mut ratio);
        assert!(med > 0.8 && med < 1.2, "distance over predictor {med}");
    }

    #[test]
    fn nonskew_coupling_step_conserves_mass_and_respects_xi() {
        let sys = nonexample(1e-3);
        let consts = PairConstants::for_system(&sys);
        let pair0 = StandardPairSpec::flat(&sys, 0.55, 0.3, 0.3 + consts.delta, consts).unwrap();
        let pair1 = StandardPairSpec::flat(&sys, 0.55 + 0.4e-3, 0.3, 0.3 + consts.delta, consts).unwrap();
        let couple = MatchedCouple::new(&sys, pair0, pair1).unwrap();
        let step = coupling_step(&sys, &couple, 0.4, 500).unwrap();
        assert!(step.m_c > 0.0 && step.m_c <= 1.0);
        assert!(step.mass_defect < 1e-10, "defect {}", step.mass_defect);
        assert!(step.xi_ratio <= (2.0 * step.d_measured * 0.4).exp() * (1.0 + 1e-6));
        let mut ratio: Vec<f64> = step.matched.iter().map(|m| m.vdist / m.predictor).collect();
        let med = median(&mut ratio);
        assert!(med > 0.5 && med < 2.0, "distance over predictor {med}");
    }

    #[test]
    fn coupling_step_wasserstein_obeys_the_component_bound() {
        let sys = one_sink(2e-4);
        let consts = PairConstants::for_system(&sys);
        let pair0 = StandardPairSpec::flat(&sys, 0.5, 0.4, 0.4 + consts.delta, consts).unwrap();
        let pair1 = StandardPairSpec::flat(&sys, 0.5 + 2e-4, 0.4, 0.4 + consts.delta, consts).unwrap();
        let couple = MatchedCouple::new(&sys, pair0.clone(), pair1.clone()).unwrap();
        let n_steps = 5000;
        let step = coupling_step(&sys, &couple, 1.0, n_steps).unwrap();
        let n = 20_000;
        let mut c0 = Cloud::from_ensemble(&sample_standard_pair(&pair0, n, 31).unwrap());
        let mut c1 = Cloud::from_ensemble(&sample_standard_pair(&pair1, n, 32).unwrap());
        c0.advance(&sys, n_steps as u64);
        c1.advance(&sys, n_steps as u64);
        let d = wasserstein_vertical(&c0, &c1, 64).unwrap();
        let zeta_max = step.matched.iter().map(|m| m.zeta).fold(f64::NEG_INFINITY, f64::max);
        let bound = 8.0 * 1.0 * sys.epsilon * zeta_max.exp() + (1.0 - step.m_c);
        assert!(d <= bound, "wasserstein {d} vs component bound {bound}");
        // the coupled mass dominates, so the distance also contracts
        assert!(d < 1.0 * sys.epsilon, "wasserstein {d} did not contract below the stacking");
    }

    #[test]
    fn iterated_coupling_rounds_contract_at_the_center_rate() {
        let sys = one_sink(2e-4);
        let report = coupling_demo(&sys, 0.5, 1.0, 2.0, 5).unwrap();
        assert_eq!(report.rounds.len(), 5);
        let target = (-2.0f64).exp();
        for r in &report.rounds {
            assert!(
                r.contraction < target * 1.3 && r.contraction > target * 0.5,
                "round {} contraction {} vs e^-t {}",
                r.round,
                r.contraction,
                target
            );
            assert!(r.m_c > 0.5 && r.m_c <= 1.0);
        }
        let d0 = report.rounds[0].delta * sys.epsilon;
        let d_end = report.rounds[4].median_dist;
        assert!(d_end / d0 < (-8.0f64).exp(), "five rounds decayed only to {}", d_end / d0);
        assert!(report.rounds[4].survival > 0.5);
        assert!(report.window.flags.is_empty(), "window flags: {:?}", report.window.flags);
    }

    #[test]
    fn overdriven_densities_recover_within_log_gamma_pushforwards() {
        let sys = one_sink(1e-3);
        let consts = PairConstants::for_system(&sys);
        let mut measured = Vec::new();
        for gamma in [2.0f64, 4.0, 8.0, 16.0] {
            let slope = gamma * consts.c2;
            let parent = RawPair::new(0.2, 0.2 + consts.delta, |_| 0.37, |x| (slope * (x - 0.2)).exp()).unwrap();
            let mut current = parent;
            let mut steps = 0u32;
            for _ in 0..12 {
                let (excess, _) = current.bound_excess(&sys, &consts);
                if excess <= 1.02 {
                    break;
                }
                let children = push_raw(&sys, &current, consts.delta).unwrap();
                current = children
                    .into_iter()
                    .max_by(|a, b| {
                        let ea = a.0.bound_excess(&sys, &consts).0;
                        let eb = b.0.bound_excess(&sys, &consts).0;
                        ea.partial_cmp(&eb).unwrap()
                    })
                    .unwrap()
                    .0;
                steps += 1;
            }
            assert!(
                steps as f64 <= (RECOVERY_LOG_FACTOR * gamma.ln()).ceil(),
                "gamma {gamma} took {steps} pushforwards"
            );
            measured.push((gamma.ln(), steps as f64));
        }
        for w in measured.windows(2) {
            assert!(w[1].1 >= w[0].1, "recovery time must grow with gamma");
        }
        let slope = measured.iter().map(|(x, y)| x * y).sum::<f64>() / measured.iter().map(|(x, _)| x * x).sum::<f64>();
        assert!(slope > 0.3 && slope <= RECOVERY_LOG_FACTOR, "fitted recovery slope {slope}");
    }

    #[test]
    fn coupling_rejects_bad_inputs() {
        let skew = one_sink(1e-3);
        let consts = PairConstants::for_system(&skew);
        let affine = System::new(Family::affine(), 1e-3);
        let pair = StandardPairSpec::flat(&skew, 0.5, 0.4, 0.4 + consts.delta, consts).unwrap();
        assert!(standard_pushforward(&affine, &pair).is_err());
        let big = System::new(Family::one_sink(), 0.2);
        assert!(standard_pushforward(&big, &pair).is_err());

        let g0 = Cheb::fit(0.4, 0.4 + consts.delta, |_| 0.5);
        let g1 = Cheb::fit(0.41, 0.41 + consts.delta, |_| 0.5);
        assert!(holonomy_map(&skew, &g0, &g1, 100, 8).is_err());

        // horizon beyond the coupling window
        let g1b = Cheb::fit(0.4, 0.4 + consts.delta, |_| 0.5 + 1e-3);
        assert!(holonomy_map(&skew, &g0, &g1b, 10_000_000, 8).is_err());

        // wide stacking on a short nonskew interval collapses the domain
        let non = nonexample(1e-3);
        let n0 = Cheb::fit(0.3, 0.301, |_| 0.55);
        let n1 = Cheb::fit(0.3, 0.301, |_| 0.55 + 0.5);
        assert!(holonomy_map(&non, &n0, &n1, 100, 8).is_err());

        // mismatched intervals refuse to match
        let p0 = StandardPairSpec::flat(&skew, 0.5, 0.4, 0.4 + consts.delta, consts).unwrap();
        let p1 = StandardPairSpec::flat(&skew, 0.5, 0.41, 0.41 + consts.delta, consts).unwrap();
        assert!(MatchedCouple::new(&skew, p0, p1).is_err());

        let _ = (BarShape::SinOverTwoPi, HatShape::Cos);
    }
}
