//! Certified interval bounds on the set of invariant-measure drive averages
//! Omega(theta), the forbidden/admissible path criteria they induce on the
//! slow circle, grid reach and trapping sets, and the structural verdicts
//! (coboundary witness, zero discreteness, sink rate, common sink, interval
//! dichotomy, two-way interior drive).
//!
//! Every verdict is one-sided sound: a periodic orbit carries an invariant
//! measure, so the orbit-average hull sits inside Omega(theta) and certifies
//! passability; the pointwise range of omega(., theta) contains Omega(theta)
//! and certifies blocking. Where the two hulls disagree the answer is
//! reported as indeterminate, never guessed.

use rayon::prelude::*;
use serde::Serialize;

use crate::averaged::{AveragedField, ZeroClassification};
use crate::circle::wrap;
use crate::fiber::{periodic_orbits, Fiber};
use crate::system::System;

/// Threshold margin used by the reach criteria, in the units of the field
/// handed to the trapping analysis (normalized units once the sink-rate
/// rescale has been applied).
pub const EPS_HAT_DEFAULT: f64 = 1e-2;

/// Itinerary budget for a single-theta hull (degree^P refinements).
pub const SPOT_ITINERARY_BUDGET: u64 = 1 << 17;

/// Itinerary budget for a whole-grid hull table (degree^P * m refinements,
/// only charged when the fiber depends on theta).
pub const GRID_ORBIT_BUDGET: u64 = 1 << 22;

/// x-resolution of the pointwise range scan behind the outer hulls.
const N_OUTER_SCAN: usize = 1024;

/// Minimal hull width accepted as a coboundary witness.
const WIDTH_TOL: f64 = 1e-9;

/// Two-sided bracket of Omega(theta): orbit averages inside, pointwise range
/// outside.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct OmegaInterval {
    pub theta: f64,
    /// min/max of omega averaged over periodic orbits of period <= p_used
    pub lo_in: f64,
    pub hi_in: f64,
    /// pointwise range of omega(., theta), widened to keep the sandwich
    pub lo_out: f64,
    pub hi_out: f64,
    pub p_used: usize,
}

/// Hull brackets tabulated at theta_j = j/m.
#[derive(Clone, Debug, Serialize)]
pub struct OmegaTable {
    pub m: usize,
    pub p_used: usize,
    pub intervals: Vec<OmegaInterval>,
}

impl OmegaTable {
    pub fn node_theta(&self, j: usize) -> f64 {
        j as f64 / self.m as f64
    }

    /// Rescale the drive units by g > 0 (hulls are linear in omega).
    pub fn scaled(&self, g: f64) -> Result<OmegaTable, String> {
        if !(g > 0.0) || !g.is_finite() {
            return Err(format!("hull rescale must be a positive number, got {g}"));
        }
        let intervals = self
            .intervals
            .iter()
            .map(|iv| OmegaInterval {
                theta: iv.theta,
                lo_in: iv.lo_in * g,
                hi_in: iv.hi_in * g,
                lo_out: iv.lo_out * g,
                hi_out: iv.hi_out * g,
                p_used: iv.p_used,
            })
            .collect();
        Ok(OmegaTable { m: self.m, p_used: self.p_used, intervals })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta,lo_out,lo_in,hi_in,hi_out\r\n");
        for iv in &self.intervals {
            out.push_str(&format!(
                "{},{},{},{},{}\r\n",
                iv.theta, iv.lo_out, iv.lo_in, iv.hi_in, iv.hi_out
            ));
        }
        out
    }
}

fn itinerary_count(degree: u32, p: usize) -> u64 {
    (degree as u64).saturating_pow(p as u32)
}

/// Orbit-average hull and pointwise range of omega(., theta) over a stored
/// orbit set. The outer bounds are widened by the inner ones so the sandwich
/// lo_out <= lo_in <= hi_in <= hi_out survives orbit points falling between
/// scan nodes.
fn hull_at(
    sys: &System,
    theta: f64,
    orbit_points: &[Vec<f64>],
    n_grid: usize,
    p_used: usize,
) -> OmegaInterval {
    let mut lo_in = f64::INFINITY;
    let mut hi_in = f64::NEG_INFINITY;
    for points in orbit_points {
        let mut sum = 0.0;
        for &x in points {
            sum += sys.omega(x, theta);
        }
        let avg = sum / points.len() as f64;
        lo_in = lo_in.min(avg);
        hi_in = hi_in.max(avg);
    }
    let mut lo_out = lo_in;
    let mut hi_out = hi_in;
    for i in 0..n_grid {
        let v = sys.omega((i as f64 + 0.5) / n_grid as f64, theta);
        lo_out = lo_out.min(v);
        hi_out = hi_out.max(v);
    }
    OmegaInterval { theta, lo_in, hi_in, lo_out, hi_out, p_used }
}

fn orbit_point_sets(sys: &System, theta: f64, p_max: usize) -> Result<Vec<Vec<f64>>, String> {
    let fiber = Fiber::new(sys, theta);
    let orbits = periodic_orbits(&fiber, p_max)?;
    if orbits.is_empty() {
        return Err("no periodic orbits found below the period cap".into());
    }
    Ok(orbits.into_iter().map(|o| o.points).collect())
}

/// Bracket Omega(theta) at a single theta.
pub fn omega_interval(
    sys: &System,
    theta: f64,
    p_max: usize,
    n_grid: usize,
) -> Result<OmegaInterval, String> {
    if p_max == 0 || p_max > 14 {
        return Err(format!("period cap must be in 1..=14, got {p_max}"));
    }
    if itinerary_count(sys.degree, p_max) > SPOT_ITINERARY_BUDGET {
        return Err(format!(
            "degree {} at period cap {p_max} exceeds the hull enumeration budget",
            sys.degree
        ));
    }
    if n_grid < 64 {
        return Err(format!("range scan needs at least 64 points, got {n_grid}"));
    }
    let theta = wrap(theta);
    let points = orbit_point_sets(sys, theta, p_max)?;
    Ok(hull_at(sys, theta, &points, n_grid, p_max))
}

/// Bracket Omega at every node of a uniform theta grid. Theta-free fibers
/// share one orbit enumeration across the whole grid.
pub fn omega_table(
    sys: &System,
    m: usize,
    p_max: usize,
    n_grid: usize,
) -> Result<OmegaTable, String> {
    if m < 64 {
        return Err(format!("hull table needs at least 64 nodes, got {m}"));
    }
    if p_max == 0 || p_max > 14 {
        return Err(format!("period cap must be in 1..=14, got {p_max}"));
    }
    if n_grid < 64 {
        return Err(format!("range scan needs at least 64 points, got {n_grid}"));
    }
    let intervals: Vec<OmegaInterval> = if sys.sup_dtheta_f == 0.0 {
        if itinerary_count(sys.degree, p_max) > SPOT_ITINERARY_BUDGET {
            return Err(format!(
                "degree {} at period cap {p_max} exceeds the hull enumeration budget",
                sys.degree
            ));
        }
        let points = orbit_point_sets(sys, 0.0, p_max)?;
        (0..m)
            .into_par_iter()
            .map(|j| hull_at(sys, j as f64 / m as f64, &points, n_grid, p_max))
            .collect()
    } else {
        if itinerary_count(sys.degree, p_max).saturating_mul(m as u64) > GRID_ORBIT_BUDGET {
            return Err(format!(
                "degree {} at period cap {p_max} on {m} nodes exceeds the grid orbit budget; \
                 lower the cap or coarsen the grid",
                sys.degree
            ));
        }
        (0..m)
            .into_par_iter()
            .map(|j| -> Result<OmegaInterval, String> {
                let theta = j as f64 / m as f64;
                let points = orbit_point_sets(sys, theta, p_max)?;
                Ok(hull_at(sys, theta, &points, n_grid, p_max))
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(OmegaTable { m, p_used: p_max, intervals })
}

/// Default grid period cap: deep for a shared orbit set, shallow when every
/// node pays its own enumeration.
fn default_grid_period(sys: &System, m: usize) -> usize {
    if sys.sup_dtheta_f == 0.0 {
        return 12;
    }
    let mut p = 4;
    while p > 1 && itinerary_count(sys.degree, p).saturating_mul(m as u64) > GRID_ORBIT_BUDGET {
        p -= 1;
    }
    p
}

/// Nodes covering the rightward arc [a, b]. Outward rounding yields a
/// superset of the arc (for universal conditions), inward a subset (for
/// existential ones; may be empty).
fn arc_nodes(m: usize, a: f64, b: f64, outward: bool) -> (usize, usize) {
    let a = wrap(a);
    let delta = (wrap(b) - a).rem_euclid(1.0);
    let u0 = a * m as f64;
    let u1 = u0 + delta * m as f64;
    let (s, e) = if outward { (u0.floor(), u1.ceil()) } else { (u0.ceil(), u1.floor()) };
    let count = ((e - s) as i64 + 1).clamp(0, m as i64) as usize;
    let start = s.rem_euclid(m as f64) as usize % m;
    (start, count)
}

fn arc_min(m: usize, span: (usize, usize), value: impl Fn(usize) -> f64) -> f64 {
    let mut best = f64::INFINITY;
    for t in 0..span.1 {
        best = best.min(value((span.0 + t) % m));
    }
    best
}

fn arc_max(m: usize, span: (usize, usize), value: impl Fn(usize) -> f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for t in 0..span.1 {
        best = best.max(value((span.0 + t) % m));
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ArcVerdict {
    AllForbidden,
    NotAllForbidden,
    Indeterminate,
}

/// Outcome of the path dichotomy for the ordered pair (theta_a, theta_b):
/// every slow path from a to b crosses either the rightward arc [a,b] or the
/// complementary arc [b,a], so blocking both blocks everything.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ForbiddenVerdict {
    pub theta_a: f64,
    pub theta_b: f64,
    pub eps_hat: f64,
    pub verdict: ArcVerdict,
    /// which hull certified the verdict ("outer", "inner", or "gap")
    pub bound_used: &'static str,
    /// min over [a,b] of the upper drive bound, outer/inner
    pub fwd_min_hi_out: f64,
    pub fwd_min_hi_in: f64,
    /// max over [b,a] of the lower drive bound, outer/inner
    pub rev_max_lo_out: f64,
    pub rev_max_lo_in: f64,
}

/// Classify the ordered arc pair at margin eps_hat. Blocking certificates
/// sample nodes strictly inside each arc; passage certificates sample a
/// node superset.
pub fn forbidden_criterion(
    table: &OmegaTable,
    theta_a: f64,
    theta_b: f64,
    eps_hat: f64,
) -> Result<ForbiddenVerdict, String> {
    if !(eps_hat > 0.0) || !eps_hat.is_finite() {
        return Err(format!("eps_hat must be a positive number, got {eps_hat}"));
    }
    let m = table.m;
    let iv = &table.intervals;
    let fwd_in = arc_nodes(m, theta_a, theta_b, false);
    let fwd_out = arc_nodes(m, theta_a, theta_b, true);
    let rev_in = arc_nodes(m, theta_b, theta_a, false);
    let rev_out = arc_nodes(m, theta_b, theta_a, true);

    let fwd_min_hi_out = arc_min(m, fwd_in, |j| iv[j].hi_out);
    let rev_max_lo_out = arc_max(m, rev_in, |j| iv[j].lo_out);
    let fwd_min_hi_in = arc_min(m, fwd_out, |j| iv[j].hi_in);
    let rev_max_lo_in = arc_max(m, rev_out, |j| iv[j].lo_in);

    let blocked = fwd_min_hi_out <= -eps_hat && rev_max_lo_out >= eps_hat;
    let passable = fwd_min_hi_in > -eps_hat || rev_max_lo_in < eps_hat;
    let (verdict, bound_used) = if blocked {
        (ArcVerdict::AllForbidden, "outer")
    } else if passable {
        (ArcVerdict::NotAllForbidden, "inner")
    } else {
        (ArcVerdict::Indeterminate, "gap")
    };
    Ok(ForbiddenVerdict {
        theta_a: wrap(theta_a),
        theta_b: wrap(theta_b),
        eps_hat,
        verdict,
        bound_used,
        fwd_min_hi_out,
        fwd_min_hi_in,
        rev_max_lo_out,
        rev_max_lo_in,
    })
}

/// Run of passable cells to the right of each node (cell j spans nodes
/// j, j+1), capped at m.
fn run_right(cells: &[bool]) -> Vec<usize> {
    let m = cells.len();
    let mut out = vec![0usize; m];
    let mut carry = 0usize;
    for j in (0..2 * m).rev() {
        let c = j % m;
        carry = if cells[c] { (carry + 1).min(m) } else { 0 };
        if j < m {
            out[c] = carry;
        }
    }
    out
}

/// Run of passable cells to the left of each node (cell j-1 is the first
/// one crossed), capped at m.
fn run_left(cells: &[bool]) -> Vec<usize> {
    let m = cells.len();
    let mut out = vec![0usize; m];
    let mut carry = 0usize;
    for j in 0..2 * m {
        let node = j % m;
        let c = (node + m - 1) % m;
        carry = if cells[c] { (carry + 1).min(m) } else { 0 };
        if j >= m {
            out[node] = carry;
        }
    }
    out
}

/// A reach interval on the grid, stored as a rightward arc [lo, hi].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ReachSet {
    pub lo: f64,
    pub hi: f64,
    pub full: bool,
    pub node_count: usize,
}

/// Per-node reach spans at a fixed margin. Forward reach grows under the
/// not-forbidden thresholds (right while hi_in > -eps, left while
/// lo_in < +eps); backward reach under the admissible thresholds (start
/// points left of the target need hi_in > +eps along the way, start points
/// right of it need lo_in < -eps).
#[derive(Clone, Debug)]
pub struct ReachField {
    pub m: usize,
    pub eps_hat: f64,
    fr_left: Vec<usize>,
    fr_right: Vec<usize>,
    br_left: Vec<usize>,
    br_right: Vec<usize>,
}

fn cell_pass(values: &[f64], pred: impl Fn(f64) -> bool) -> Vec<bool> {
    let m = values.len();
    (0..m).map(|i| pred(values[i]) && pred(values[(i + 1) % m])).collect()
}

impl ReachField {
    pub fn build(table: &OmegaTable, eps_hat: f64) -> ReachField {
        let hi_in: Vec<f64> = table.intervals.iter().map(|iv| iv.hi_in).collect();
        let lo_in: Vec<f64> = table.intervals.iter().map(|iv| iv.lo_in).collect();
        ReachField {
            m: table.m,
            eps_hat,
            fr_right: run_right(&cell_pass(&hi_in, |v| v > -eps_hat)),
            fr_left: run_left(&cell_pass(&lo_in, |v| v < eps_hat)),
            br_left: run_left(&cell_pass(&hi_in, |v| v > eps_hat)),
            br_right: run_right(&cell_pass(&lo_in, |v| v < -eps_hat)),
        }
    }

    /// (start node, node count) of the forward reach from node j.
    pub fn freach_span(&self, j: usize) -> (usize, usize) {
        span(self.m, j, self.fr_left[j], self.fr_right[j])
    }

    /// (start node, node count) of the backward reach of node j.
    pub fn breach_span(&self, j: usize) -> (usize, usize) {
        span(self.m, j, self.br_left[j], self.br_right[j])
    }

    pub fn freach(&self, j: usize) -> ReachSet {
        reach_set(self.m, self.freach_span(j))
    }

    pub fn breach(&self, j: usize) -> ReachSet {
        reach_set(self.m, self.breach_span(j))
    }
}

fn span(m: usize, j: usize, left: usize, right: usize) -> (usize, usize) {
    if left + right >= m {
        (0, m)
    } else {
        ((j + m - left) % m, left + right + 1)
    }
}

fn reach_set(m: usize, (start, len): (usize, usize)) -> ReachSet {
    ReachSet {
        lo: start as f64 / m as f64,
        hi: ((start + len - 1) % m) as f64 / m as f64,
        full: len >= m,
        node_count: len,
    }
}

/// Whether the span `inner` is contained in the span `outer` on the cyclic
/// node grid.
pub fn span_contains((o_start, o_len): (usize, usize), (i_start, i_len): (usize, usize), m: usize) -> bool {
    if o_len >= m {
        return true;
    }
    if i_len >= m {
        return false;
    }
    (i_start + m - o_start) % m + i_len <= o_len
}

fn mask_to_intervals(mask: &[bool], m: usize) -> Vec<(f64, f64)> {
    if mask.iter().all(|&b| b) {
        return vec![(0.0, 1.0)];
    }
    let mut runs = Vec::new();
    // start scanning just past a gap so wrap-around runs stay in one piece
    let anchor = mask.iter().position(|&b| !b).unwrap_or(0);
    let mut j = 0;
    while j < m {
        let idx = (anchor + j) % m;
        if mask[idx] {
            let start = idx;
            let mut len = 0;
            while j < m && mask[(anchor + j) % m] {
                len += 1;
                j += 1;
            }
            runs.push((start as f64 / m as f64, ((start + len - 1) % m) as f64 / m as f64));
        } else {
            j += 1;
        }
    }
    runs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum VerdictStatus {
    Holds,
    Fails,
    Indeterminate,
}

/// A named structural verdict with the numerical margin that certified it.
#[derive(Clone, Debug, Serialize)]
pub struct Verdict {
    pub name: String,
    pub status: VerdictStatus,
    pub margin: f64,
    pub note: String,
}

impl Verdict {
    fn new(name: &str, status: VerdictStatus, margin: f64, note: String) -> Verdict {
        Verdict { name: name.into(), status, margin, note }
    }
}

/// Reach data and trap membership for one sink.
#[derive(Clone, Debug, Serialize)]
pub struct SinkTrap {
    pub sink_theta: f64,
    pub freach: ReachSet,
    pub breach: ReachSet,
    /// certified two-way neighborhood of the sink, when one exists
    pub theta_nbhd: Option<(f64, f64)>,
    pub trap_intervals: Vec<(f64, f64)>,
    pub trap_nodes: usize,
    pub recurrent: bool,
}

/// A distinct nonempty trapping set shared by one or more sinks.
#[derive(Clone, Debug, Serialize)]
pub struct TrapClass {
    /// sinks whose trapping sets coincide with this one
    pub sink_members: Vec<usize>,
    /// sinks whose position lies inside this set
    pub sinks_inside: usize,
    pub intervals: Vec<(f64, f64)>,
    pub node_count: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrappingReport {
    pub eps_hat: f64,
    pub m: usize,
    pub p_used: usize,
    /// certified radius of Omega's interior at the drift zeros
    pub rho_interior: Option<f64>,
    pub t_bas: Option<f64>,
    pub t_trap: Option<f64>,
    pub sinks: Vec<SinkTrap>,
    /// number of distinct nonempty trapping sets
    pub n_t: usize,
    pub traps: Vec<TrapClass>,
    pub a0: Verdict,
    pub a3: Verdict,
    pub a4: Verdict,
    pub a4_star: Verdict,
    #[serde(skip)]
    pub trap_masks: Vec<Vec<bool>>,
}

impl TrappingReport {
    /// Node-by-node trap membership, one 0/1 column per sink.
    pub fn mask_csv(&self) -> String {
        let mut out = String::from("theta");
        for i in 0..self.trap_masks.len() {
            out.push_str(&format!(",trap_{}", i + 1));
        }
        out.push_str("\r\n");
        for j in 0..self.m {
            out.push_str(&format!("{}", j as f64 / self.m as f64));
            for mask in &self.trap_masks {
                out.push_str(if mask[j] { ",1" } else { ",0" });
            }
            out.push_str("\r\n");
        }
        out
    }
}

/// Trapping analysis against a prebuilt hull table (already in the same
/// units as eps_hat).
pub fn trapping_from_table(
    table: &OmegaTable,
    class: &ZeroClassification,
    eps_hat: f64,
) -> Result<TrappingReport, String> {
    if !(eps_hat > 0.0) || !eps_hat.is_finite() {
        return Err(format!("eps_hat must be a positive number, got {eps_hat}"));
    }
    if class.sinks.is_empty() {
        return Err("trapping analysis needs at least one sink".into());
    }
    let m = table.m;
    let iv = &table.intervals;
    let reach = ReachField::build(table, eps_hat);
    let nearest = |theta: f64| ((wrap(theta) * m as f64).round() as usize) % m;

    // certified interior radius of Omega at the zeros
    let mut rho = f64::INFINITY;
    for z in &class.zeros {
        let j = nearest(z.theta);
        rho = rho.min(iv[j].hi_in).min(-iv[j].lo_in);
    }
    let rho_interior = (rho > 0.0).then_some(rho);
    let t_bas = rho_interior.map(|r| 2.0 / r);
    let t_trap = t_bas.map(|t| t + 1.0 / eps_hat);

    // per-sink trapping masks: nodes whose forward reach stays inside the
    // sink's backward reach
    let freach_spans: Vec<(usize, usize)> = (0..m).map(|j| reach.freach_span(j)).collect();
    let mut sinks = Vec::with_capacity(class.sinks.len());
    let mut trap_masks = Vec::with_capacity(class.sinks.len());
    for z in &class.sinks {
        let s = nearest(z.theta);
        let b_span = reach.breach_span(s);
        let mask: Vec<bool> =
            (0..m).map(|j| span_contains(b_span, freach_spans[j], m)).collect();
        let trap_nodes = mask.iter().filter(|&&b| b).count();

        // two-way neighborhood of the sink at radius rho_interior
        let theta_nbhd = rho_interior.map(|r| {
            let ok = |j: usize| iv[j].hi_in >= r && iv[j].lo_in <= -r;
            let mut left = 0;
            while left < m && ok((s + m - left - 1) % m) {
                left += 1;
            }
            let mut right = 0;
            while left + right < m && ok((s + right + 1) % m) {
                right += 1;
            }
            let (start, len) = span(m, s, left, right);
            (start as f64 / m as f64, ((start + len - 1) % m) as f64 / m as f64)
        });
        let recurrent = match theta_nbhd {
            Some(_) => {
                let ok = |j: usize| iv[j].hi_in >= rho && iv[j].lo_in <= -rho;
                let mut covered = mask[s];
                let mut step = 1;
                while covered && step < m && ok((s + m - step) % m) {
                    covered = mask[(s + m - step) % m];
                    step += 1;
                }
                step = 1;
                while covered && step < m && ok((s + step) % m) {
                    covered = mask[(s + step) % m];
                    step += 1;
                }
                covered
            }
            None => mask[s],
        };
        sinks.push(SinkTrap {
            sink_theta: z.theta,
            freach: reach.freach(s),
            breach: reach.breach(s),
            theta_nbhd,
            trap_intervals: mask_to_intervals(&mask, m),
            trap_nodes,
            recurrent,
        });
        trap_masks.push(mask);
    }

    // distinct nonempty trapping sets; unequal sets must not overlap
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..trap_masks.len() {
        if sinks[i].trap_nodes == 0 {
            continue;
        }
        if let Some(g) = groups.iter_mut().find(|g| trap_masks[g[0]] == trap_masks[i]) {
            g.push(i);
            continue;
        }
        for g in &groups {
            let other = &trap_masks[g[0]];
            if trap_masks[i].iter().zip(other).any(|(&a, &b)| a && b) {
                return Err(format!(
                    "trapping sets of sinks {} and {} overlap without coinciding; refine the grid",
                    g[0], i
                ));
            }
        }
        groups.push(vec![i]);
    }
    let sink_nodes: Vec<usize> = class.sinks.iter().map(|z| nearest(z.theta)).collect();
    let traps: Vec<TrapClass> = groups
        .iter()
        .map(|g| {
            let mask = &trap_masks[g[0]];
            TrapClass {
                sink_members: g.clone(),
                sinks_inside: sink_nodes.iter().filter(|&&s| mask[s]).count(),
                intervals: mask_to_intervals(mask, m),
                node_count: sinks[g[0]].trap_nodes,
            }
        })
        .collect();
    let n_t = traps.len();

    let a0 = verdict_no_coboundary(table);
    let a3 = verdict_common_sink(table, &sinks, &sink_nodes, eps_hat);
    let a4 = verdict_interval_dichotomy(table, class);
    let a4_star = verdict_interior_drive(table);

    Ok(TrappingReport {
        eps_hat,
        m,
        p_used: table.p_used,
        rho_interior,
        t_bas,
        t_trap,
        sinks,
        n_t,
        traps,
        a0,
        a3,
        a4,
        a4_star,
        trap_masks,
    })
}

/// Trapping analysis from scratch: builds the hull table at the field's
/// drive units and the internal period cap.
pub fn trapping_sets(
    sys: &System,
    field: &AveragedField,
    class: &ZeroClassification,
    eps_hat: f64,
    m: usize,
) -> Result<TrappingReport, String> {
    let p = default_grid_period(sys, m);
    let table = omega_table(sys, m, p, N_OUTER_SCAN)?.scaled(field.rescale)?;
    trapping_from_table(&table, class, eps_hat)
}

fn verdict_no_coboundary(table: &OmegaTable) -> Verdict {
    let width = table
        .intervals
        .iter()
        .map(|iv| iv.hi_in - iv.lo_in)
        .fold(f64::INFINITY, f64::min);
    if width > WIDTH_TOL {
        Verdict::new(
            "no_coboundary",
            VerdictStatus::Holds,
            width,
            format!(
                "orbit averages up to period {} differ by at least {width:.3e} at every node",
                table.p_used
            ),
        )
    } else {
        Verdict::new(
            "no_coboundary",
            VerdictStatus::Indeterminate,
            width,
            "all sampled orbit averages coincide somewhere; no witness pair found".into(),
        )
    }
}

fn verdict_common_sink(
    table: &OmegaTable,
    sinks: &[SinkTrap],
    sink_nodes: &[usize],
    eps_hat: f64,
) -> Verdict {
    let m = table.m;
    // inner certificate: some sink's backward reach covers the grid
    let mut best_inner = 0.0f64;
    for (i, s) in sinks.iter().enumerate() {
        let frac = s.breach.node_count as f64 / m as f64;
        best_inner = best_inner.max(frac);
        if s.breach.full {
            return Verdict::new(
                "common_sink",
                VerdictStatus::Holds,
                1.0,
                format!("every node admits a path into the sink at theta = {}", s.sink_theta),
            );
        }
        let _ = i;
    }
    // outer certificate: an upper bound on each backward reach stays short
    // of the grid, so no sink is commonly reachable
    let hi_out: Vec<f64> = table.intervals.iter().map(|iv| iv.hi_out).collect();
    let lo_out: Vec<f64> = table.intervals.iter().map(|iv| iv.lo_out).collect();
    let left_runs = run_left(&cell_pass(&hi_out, |v| v > eps_hat));
    let right_runs = run_right(&cell_pass(&lo_out, |v| v < -eps_hat));
    let mut worst_outer = 0.0f64;
    let mut all_bounded = true;
    for &s in sink_nodes {
        let len = span(m, s, left_runs[s], right_runs[s]).1;
        worst_outer = worst_outer.max(len as f64 / m as f64);
        if len >= m {
            all_bounded = false;
        }
    }
    if all_bounded {
        Verdict::new(
            "common_sink",
            VerdictStatus::Fails,
            worst_outer,
            format!(
                "every sink's admissible catchment is blocked on both sides; best outer \
                 coverage {:.3}",
                worst_outer
            ),
        )
    } else {
        Verdict::new(
            "common_sink",
            VerdictStatus::Indeterminate,
            best_inner,
            format!(
                "inner hulls cover at most {best_inner:.3} of the grid but outer hulls do not \
                 certify blocking"
            ),
        )
    }
}

fn verdict_interval_dichotomy(table: &OmegaTable, class: &ZeroClassification) -> Verdict {
    let m = table.m;
    let iv = &table.intervals;
    let n = class.zeros.len();
    let mut margin = f64::INFINITY;
    let mut interior = 0usize;
    let mut one_way = 0usize;
    let mut undecided = Vec::new();
    for k in 0..n {
        let za = class.zeros[k].theta;
        let zb = class.zeros[(k + 1) % n].theta;
        let span_k = arc_nodes(m, za, zb, false);
        if span_k.1 == 0 {
            undecided.push(k);
            continue;
        }
        let interior_margin =
            arc_min(m, span_k, |j| iv[j].hi_in.min(-iv[j].lo_in));
        let one_way_margin =
            arc_max(m, span_k, |j| iv[j].lo_out.max(-iv[j].hi_out));
        if one_way_margin > 0.0 {
            one_way += 1;
            margin = margin.min(one_way_margin);
        } else if interior_margin > 0.0 {
            interior += 1;
            margin = margin.min(interior_margin);
        } else {
            undecided.push(k);
        }
    }
    if undecided.is_empty() {
        Verdict::new(
            "interval_dichotomy",
            VerdictStatus::Holds,
            margin,
            format!("{interior} intervals two-way, {one_way} one-way"),
        )
    } else {
        Verdict::new(
            "interval_dichotomy",
            VerdictStatus::Indeterminate,
            0.0,
            format!(
                "zero sits in the hull gap on interval(s) {undecided:?}; neither certificate \
                 applies"
            ),
        )
    }
}

fn verdict_interior_drive(table: &OmegaTable) -> Verdict {
    let hold_margin = table
        .intervals
        .iter()
        .map(|iv| iv.hi_in.min(-iv.lo_in))
        .fold(f64::INFINITY, f64::min);
    if hold_margin > 0.0 {
        return Verdict::new(
            "interior_drive",
            VerdictStatus::Holds,
            hold_margin,
            "zero is interior to the certified hull at every node".into(),
        );
    }
    let fail_margin = table
        .intervals
        .iter()
        .map(|iv| iv.lo_out.max(-iv.hi_out))
        .fold(f64::NEG_INFINITY, f64::max);
    if fail_margin > 0.0 {
        Verdict::new(
            "interior_drive",
            VerdictStatus::Fails,
            fail_margin,
            "the full drive range excludes zero at some node".into(),
        )
    } else {
        Verdict::new(
            "interior_drive",
            VerdictStatus::Indeterminate,
            0.0,
            "zero falls between the inner and outer hulls somewhere".into(),
        )
    }
}

/// The full verdict record. eps_hat is interpreted in normalized drive units
/// when the sink-rate normalization succeeds, raw units otherwise.
#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    pub eps_hat: f64,
    /// the same threshold in raw drive units
    pub eps_hat_raw: f64,
    /// sink-rate rescale factor, when the normalization succeeded
    pub normalization: Option<f64>,
    /// no_coboundary, discrete_zeros, sink_rate, common_sink,
    /// interval_dichotomy, interior_drive
    pub verdicts: Vec<Verdict>,
    pub trapping: Option<TrappingReport>,
}

impl AssumptionReport {
    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }
}

/// Evaluate all six structural verdicts for a system: tabulate the slow
/// field at m nodes (fiber resolution n_fiber), classify the drift zeros,
/// normalize the sink rate, and run the trapping analysis with hulls up to
/// period p_max.
pub fn assumption_report(
    sys: &System,
    p_max: usize,
    n_fiber: usize,
    m: usize,
    eps_hat: f64,
) -> Result<AssumptionReport, String> {
    let field = crate::averaged::tabulate_field(sys, m.max(256), n_fiber)?;
    let mut verdicts = Vec::with_capacity(6);

    let class = match crate::averaged::classify_zeros(&field, 1e-6) {
        Ok(c) => {
            let min_slope =
                c.zeros.iter().map(|z| z.slope.abs()).fold(f64::INFINITY, f64::min);
            verdicts.push(Verdict::new(
                "discrete_zeros",
                VerdictStatus::Holds,
                min_slope,
                format!("{} simple zeros, slowest slope {min_slope:.4e}", c.n_z * 2),
            ));
            Some(c)
        }
        Err(e) => {
            verdicts.push(Verdict::new("discrete_zeros", VerdictStatus::Fails, 0.0, e));
            None
        }
    };

    let Some(class) = class else {
        // without zeros there is no sink to normalize against or trap
        let table = omega_table(sys, m, default_grid_period(sys, m).min(p_max), N_OUTER_SCAN)?;
        let mut out = vec![verdict_no_coboundary(&table)];
        out.append(&mut verdicts);
        for name in ["sink_rate", "common_sink", "interval_dichotomy", "interior_drive"] {
            out.push(Verdict::new(
                name,
                VerdictStatus::Indeterminate,
                0.0,
                "requires a valid zero classification".into(),
            ));
        }
        // interval_dichotomy and interior_drive only need the hull table
        let idx = out.len() - 2;
        out[idx] = verdict_interval_dichotomy_fallback(&table);
        out[idx + 1] = verdict_interior_drive(&table);
        return Ok(AssumptionReport {
            eps_hat,
            eps_hat_raw: eps_hat,
            normalization: None,
            verdicts: out,
            trapping: None,
        });
    };

    let (normalization, field_used) =
        match crate::averaged::normalize_sink_rate(&field, &class) {
            Ok((g, nf)) => {
                verdicts.push(Verdict::new(
                    "sink_rate",
                    VerdictStatus::Holds,
                    1.0 / g,
                    format!("worst sink center rate {:.6} before rescale by {g:.6}", -1.0 / g),
                ));
                (Some(g), nf)
            }
            Err(e) => {
                verdicts.push(Verdict::new("sink_rate", VerdictStatus::Fails, 0.0, e));
                (None, field)
            }
        };

    let p_grid = default_grid_period(sys, m).min(p_max.max(1));
    let table = omega_table(sys, m, p_grid, N_OUTER_SCAN)?.scaled(field_used.rescale)?;
    let trapping = trapping_from_table(&table, &class, eps_hat)?;

    let mut out = vec![trapping.a0.clone()];
    out.append(&mut verdicts);
    out.push(trapping.a3.clone());
    out.push(trapping.a4.clone());
    out.push(trapping.a4_star.clone());

    Ok(AssumptionReport {
        eps_hat,
        eps_hat_raw: eps_hat / field_used.rescale,
        normalization,
        verdicts: out,
        trapping: Some(trapping),
    })
}

/// Interval dichotomy degenerates to the interior check when there are no
/// zeros to cut the circle.
fn verdict_interval_dichotomy_fallback(table: &OmegaTable) -> Verdict {
    let inner = verdict_interior_drive(table);
    Verdict::new(
        "interval_dichotomy",
        inner.status,
        inner.margin,
        "no zeros: the whole circle is one interval".into(),
    )
}

/// n_T as a function of the margin, for stability reporting.
pub fn trap_stability(
    table: &OmegaTable,
    class: &ZeroClassification,
    eps_hats: &[f64],
) -> Result<Vec<(f64, usize)>, String> {
    eps_hats
        .iter()
        .map(|&e| trapping_from_table(table, class, e).map(|r| (e, r.n_t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::averaged::{classify_zeros, normalize_sink_rate, tabulate_field};
    use crate::fiber::UlamOperator;
    use crate::system::{BarShape, Family, HatShape, System};
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn nonergodic() -> System {
        System::new(Family::two_sink_nonergodic(), 0.01).unwrap()
    }

    type SharedFixture = (System, OmegaTable, AveragedField, ZeroClassification);

    fn shared_nonergodic() -> &'static SharedFixture {
        static CELL: OnceLock<SharedFixture> = OnceLock::new();
        CELL.get_or_init(|| {
            let sys = nonergodic();
            let field = tabulate_field(&sys, 256, 512).unwrap();
            let class = classify_zeros(&field, 1e-6).unwrap();
            let table = omega_table(&sys, 256, 4, 512).unwrap();
            (sys, table, field, class)
        })
    }

    #[test]
    fn hulls_nest_and_widen_with_period() {
        let sys = nonergodic();
        for &theta in &[0.1, 0.37, 0.81] {
            let mut prev: Option<OmegaInterval> = None;
            for p in 1..=6 {
                let iv = omega_interval(&sys, theta, p, 512).unwrap();
                assert!(iv.lo_out <= iv.lo_in + 1e-12);
                assert!(iv.lo_in <= iv.hi_in + 1e-12);
                assert!(iv.hi_in <= iv.hi_out + 1e-12);
                if let Some(q) = prev {
                    assert!(iv.lo_in <= q.lo_in + 1e-12, "inner hull shrank at period {p}");
                    assert!(iv.hi_in >= q.hi_in - 1e-12);
                }
                prev = Some(iv);
            }
            // from period 2 on, the hull holds the Lebesgue drift average
            let fiber = Fiber::new(&sys, theta);
            let rho = UlamOperator::build(&fiber, 512).unwrap().invariant_density().unwrap();
            let drift = crate::fiber::averaged_drift(&fiber, &rho);
            let iv = prev.unwrap();
            assert!(iv.lo_in - 1e-7 <= drift && drift <= iv.hi_in + 1e-7);
            assert!(iv.lo_out - 1e-12 <= drift && drift <= iv.hi_out + 1e-12);
        }
    }

    #[test]
    fn silent_drive_hull_degenerates_to_the_drift() {
        let sys = System::new(
            Family::SkewDoubling { bar: BarShape::SinFourPi, hat: HatShape::Cos { amp: 0.0 } },
            0.01,
        )
        .unwrap();
        for &theta in &[0.0, 0.2, 0.65] {
            let iv = omega_interval(&sys, theta, 3, 256).unwrap();
            let expected = crate::trig::sin2pi(2.0 * theta);
            for v in [iv.lo_in, iv.hi_in, iv.lo_out, iv.hi_out] {
                assert!((v - expected).abs() < 1e-12, "hull {v} vs drift {expected}");
            }
        }
    }

    #[test]
    fn doubling_cosine_hull_matches_hand_orbits() {
        // fixed point x = 0 averages +1/2; the 2-cycle {1/3, 2/3} averages -1/4
        let sys = nonergodic();
        let theta = 0.3;
        let bar = crate::trig::sin2pi(2.0 * theta);
        let iv = omega_interval(&sys, theta, 2, 1024).unwrap();
        assert!((iv.hi_in - (bar + 0.5)).abs() < 1e-10);
        assert!((iv.lo_in - (bar - 0.25)).abs() < 1e-10);
        assert!((iv.hi_out - (bar + 0.5)).abs() < 1e-10);
        assert!((iv.lo_out - (bar - 0.5)).abs() < 1e-4);
        assert_eq!(iv.p_used, 2);
    }

    #[test]
    fn plateau_hull_covers_the_unit_band() {
        let sys = System::new(Family::two_sink_ergodic(), 0.01).unwrap();
        let theta = 0.3;
        let bar = crate::trig::sin2pi(2.0 * theta);
        let iv = omega_interval(&sys, theta, 2, 512).unwrap();
        assert!((iv.hi_in - (bar + 3.0)).abs() < 1e-9, "peak orbit at x = 0 carries the cap");
        assert!(iv.lo_in <= 1.0 && iv.hi_in >= 2.0, "hull misses [1, 2]: {iv:?}");
    }

    #[test]
    fn forbidden_verdicts_span_all_three_outcomes() {
        let (_, table, _, _) = shared_nonergodic();

        // saddle arcs block both ways at the quarter margin
        let v = forbidden_criterion(table, 0.25, 0.75, 0.25).unwrap();
        assert_eq!(v.verdict, ArcVerdict::AllForbidden);
        assert_eq!(v.bound_used, "outer");
        let v = forbidden_criterion(table, 0.75, 0.25, 0.25).unwrap();
        assert_eq!(v.verdict, ArcVerdict::AllForbidden);

        // inside a basin the forward arc stays passable
        let v = forbidden_criterion(table, 0.18, 0.30, 0.25).unwrap();
        assert_eq!(v.verdict, ArcVerdict::NotAllForbidden);
        assert_eq!(v.bound_used, "inner");

        // a large margin forgives even the saddle
        let v = forbidden_criterion(table, 0.25, 0.75, 0.6).unwrap();
        assert_eq!(v.verdict, ArcVerdict::NotAllForbidden);

        // endpoints chosen so the reverse arc tops out between the hulls
        let v = forbidden_criterion(table, 0.6, 0.173, 0.48).unwrap();
        assert_eq!(v.verdict, ArcVerdict::Indeterminate);
        assert_eq!(v.bound_used, "gap");

        // rejects a nonsensical margin
        assert!(forbidden_criterion(table, 0.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn nonergodic_traps_split_the_circle() {
        let (_, table, _, class) = shared_nonergodic();
        let report = trapping_from_table(table, class, 0.2).unwrap();

        assert_eq!(report.n_t, 2);
        assert_eq!(report.sinks.len(), 2);
        assert!(report.sinks.iter().all(|s| s.recurrent));
        assert_eq!(report.traps.len(), 2);
        assert!(report.traps.iter().all(|t| t.sinks_inside == 1));

        // the two masks are the same picture half a turn apart
        let m = report.m;
        let in_trap = |mask: &[bool], theta: f64| mask[(theta * m as f64).round() as usize % m];
        for (theta, expect) in [
            (0.05, true),
            (0.25, true),
            (0.42, true),
            (0.02, false),
            (0.45, false),
            (0.47, false),
            (0.75, false),
        ] {
            assert_eq!(
                in_trap(&report.trap_masks[0], theta),
                expect,
                "trap 1 membership at theta = {theta}"
            );
            assert_eq!(
                in_trap(&report.trap_masks[1], wrap(theta + 0.5)),
                expect,
                "trap 2 membership at theta = {}",
                wrap(theta + 0.5)
            );
        }

        // reach intervals around the first sink match the hand-computed arcs
        let s = &report.sinks[0];
        assert!((s.freach.lo - 0.2129).abs() < 0.02, "freach lo {}", s.freach.lo);
        assert!((s.freach.hi - 0.3117).abs() < 0.02, "freach hi {}", s.freach.hi);
        assert!((s.breach.lo - 0.9757).abs() < 0.02, "breach lo {}", s.breach.lo);
        assert!((s.breach.hi - 0.504).abs() < 0.02, "breach hi {}", s.breach.hi);
        assert!(!s.freach.full && !s.breach.full);

        // hulls at the zeros straddle zero by exactly the 2-cycle average
        let rho = report.rho_interior.unwrap();
        assert!((rho - 0.25).abs() < 1e-6, "interior radius {rho}");
        assert!((report.t_bas.unwrap() - 8.0).abs() < 1e-4);
        assert!((report.t_trap.unwrap() - 13.0).abs() < 1e-4);

        // structural verdicts for the blocked two-sink picture
        assert_eq!(report.a0.status, VerdictStatus::Holds);
        assert_eq!(report.a3.status, VerdictStatus::Fails);
        assert_eq!(report.a4.status, VerdictStatus::Holds);
        assert!(report.a4.note.contains("one-way"));
        assert_eq!(report.a4_star.status, VerdictStatus::Fails);
    }

    #[test]
    fn ergodic_family_has_one_trap_covering_everything() {
        let sys = System::new(Family::two_sink_ergodic(), 0.01).unwrap();
        let field = tabulate_field(&sys, 256, 512).unwrap();
        let class = classify_zeros(&field, 1e-6).unwrap();
        let report = trapping_sets(&sys, &field, &class, 0.25, 256).unwrap();

        assert_eq!(report.n_t, 1);
        assert_eq!(report.traps[0].sink_members, vec![0, 1]);
        assert_eq!(report.traps[0].sinks_inside, 2);
        assert_eq!(report.traps[0].node_count, 256);
        assert_eq!(report.traps[0].intervals, vec![(0.0, 1.0)]);
        assert!(report.sinks.iter().all(|s| s.recurrent && s.breach.full));
        assert_eq!(report.a3.status, VerdictStatus::Holds);
        assert!((report.a3.margin - 1.0).abs() < 1e-12);
        assert_eq!(report.a4.status, VerdictStatus::Holds);
        assert_eq!(report.a4_star.status, VerdictStatus::Fails);
    }

    #[test]
    fn one_sink_trap_is_the_whole_circle() {
        let sys = System::new(Family::one_sink(), 0.01).unwrap();
        let field = tabulate_field(&sys, 256, 512).unwrap();
        let class = classify_zeros(&field, 1e-6).unwrap();
        let report = trapping_sets(&sys, &field, &class, EPS_HAT_DEFAULT, 256).unwrap();

        assert_eq!(report.n_t, 1);
        assert_eq!(report.traps[0].node_count, 256);
        assert!(report.sinks[0].recurrent);
        assert_eq!(report.a3.status, VerdictStatus::Holds);
        assert_eq!(report.a4.status, VerdictStatus::Holds);
        assert!(report.a4.note.contains("2 intervals two-way"));
        assert_eq!(report.a4_star.status, VerdictStatus::Holds);
        // interior margin is the 2-cycle average 3/2 minus the drift peak
        let expected = 1.5 - 1.0 / (2.0 * std::f64::consts::PI);
        assert!((report.a4_star.margin - expected).abs() < 0.05);
    }

    #[test]
    fn trap_count_collapses_past_the_quarter_margin() {
        let (_, table, _, class) = shared_nonergodic();
        let sweep =
            trap_stability(table, class, &[0.05, 0.1, 0.2, 0.24, 0.26, 0.3, 0.45]).unwrap();
        for (e, n_t) in sweep {
            let expect = if e < 0.25 { 2 } else { 0 };
            assert_eq!(n_t, expect, "n_T at margin {e}");
        }
    }

    #[test]
    fn assumption_reports_tell_each_family_story() {
        // one sink: everything holds
        let sys = System::new(Family::one_sink(), 0.01).unwrap();
        let rep = assumption_report(&sys, 6, 512, 256, EPS_HAT_DEFAULT).unwrap();
        assert_eq!(rep.verdicts.len(), 6);
        for v in &rep.verdicts {
            assert_eq!(v.status, VerdictStatus::Holds, "{} on one_sink: {}", v.name, v.note);
        }
        assert!((rep.normalization.unwrap() - 1.0).abs() < 1e-9);
        assert!((rep.eps_hat_raw - EPS_HAT_DEFAULT).abs() < 1e-12);

        // blocked two-sink family: no common sink, no two-way drive
        let sys = nonergodic();
        let rep = assumption_report(&sys, 6, 512, 256, EPS_HAT_DEFAULT).unwrap();
        let status = |name: &str| rep.verdict(name).unwrap().status;
        assert_eq!(status("no_coboundary"), VerdictStatus::Holds);
        assert_eq!(status("discrete_zeros"), VerdictStatus::Holds);
        assert_eq!(status("sink_rate"), VerdictStatus::Holds);
        assert_eq!(status("common_sink"), VerdictStatus::Fails);
        assert_eq!(status("interval_dichotomy"), VerdictStatus::Holds);
        assert_eq!(status("interior_drive"), VerdictStatus::Fails);
        let g = rep.normalization.unwrap();
        assert!((g - 0.25 / std::f64::consts::PI).abs() < 1e-6);
        assert!((rep.eps_hat_raw - EPS_HAT_DEFAULT / g).abs() < 1e-9);
        assert_eq!(rep.trapping.as_ref().unwrap().n_t, 2);

        // expanding-center family: the sink rate is the lone failure
        let sys = System::new(Family::nonexample(5, 0.05, 0.02), 1e-3).unwrap();
        let rep = assumption_report(&sys, 3, 512, 256, EPS_HAT_DEFAULT).unwrap();
        let status = |name: &str| rep.verdict(name).unwrap().status;
        assert_eq!(status("no_coboundary"), VerdictStatus::Holds);
        assert_eq!(status("discrete_zeros"), VerdictStatus::Holds);
        assert_eq!(status("sink_rate"), VerdictStatus::Fails);
        assert_eq!(status("common_sink"), VerdictStatus::Holds);
        assert_eq!(status("interior_drive"), VerdictStatus::Holds);
        assert!(rep.normalization.is_none());
        assert!((rep.eps_hat_raw - EPS_HAT_DEFAULT).abs() < 1e-12);
    }

    #[test]
    fn reports_serialize_and_masks_export() {
        let (_, table, _, class) = shared_nonergodic();
        let report = trapping_from_table(table, class, 0.2).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"eps_hat\":0.2"));
        assert!(json.contains("\"n_t\":2"));
        assert!(!json.contains("trap_masks"), "raw masks stay out of the JSON");

        let csv = report.mask_csv();
        let lines: Vec<&str> = csv.split("\r\n").filter(|l| !l.is_empty()).collect();
        assert_eq!(lines.len(), 257);
        assert_eq!(lines[0], "theta,trap_1,trap_2");
        assert!(lines[65].starts_with("0.25") && lines[65].ends_with(",1,0"));

        let csv = table.to_csv();
        assert!(csv.starts_with("theta,lo_out,lo_in,hi_in,hi_out\r\n"));
        assert_eq!(csv.split("\r\n").filter(|l| !l.is_empty()).count(), 257);
    }

    #[test]
    fn normalized_field_shifts_the_margin_units() {
        // the trapping verdict at normalized margin e matches the raw
        // verdict at e / rescale, on both sides of the blocking threshold
        let (sys, _, field, class) = shared_nonergodic();
        let (g, nf) = normalize_sink_rate(field, class).unwrap();
        for (e_norm, expect) in [(0.01, 2), (0.02, 0)] {
            let raw = trapping_sets(sys, field, class, e_norm / g, 256).unwrap();
            let norm = trapping_sets(sys, &nf, class, e_norm, 256).unwrap();
            assert_eq!(raw.n_t, expect, "raw margin {}", e_norm / g);
            assert_eq!(norm.n_t, expect, "normalized margin {e_norm}");
            for (a, b) in raw.trap_masks.iter().zip(&norm.trap_masks) {
                assert_eq!(a, b);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn reach_sets_are_transitive_on_the_grid(
            j in 0usize..256,
            pick in 0usize..4096,
            e in 0.02f64..0.6,
        ) {
            let (_, table, _, _) = shared_nonergodic();
            let reach = ReachField::build(table, e);
            let m = table.m;

            let f = reach.freach_span(j);
            let j2 = (f.0 + pick % f.1) % m;
            let f2 = reach.freach_span(j2);
            prop_assert!(
                span_contains(f, f2, m),
                "freach({j2}) = {f2:?} escapes freach({j}) = {f:?} at margin {e}"
            );

            let b = reach.breach_span(j);
            let j3 = (b.0 + pick % b.1) % m;
            let b2 = reach.breach_span(j3);
            prop_assert!(
                span_contains(b, b2, m),
                "breach({j3}) = {b2:?} escapes breach({j}) = {b:?} at margin {e}"
            );
        }

        #[test]
        fn shrinking_the_margin_grows_the_traps(
            e_lo in 0.02f64..0.58,
            bump in 0.01f64..0.2,
        ) {
            let (_, table, _, class) = shared_nonergodic();
            let e_hi = (e_lo + bump).min(0.6);
            let wide = trapping_from_table(table, class, e_lo).unwrap();
            let narrow = trapping_from_table(table, class, e_hi).unwrap();
            for (w, n) in wide.trap_masks.iter().zip(&narrow.trap_masks) {
                for (j, (&a, &b)) in w.iter().zip(n).enumerate() {
                    prop_assert!(
                        a || !b,
                        "node {j} trapped at margin {e_hi} but free at {e_lo}"
                    );
                }
            }
        }
    }
}
