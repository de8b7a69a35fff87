//! Comparison diffusion on the slow circle: Euler paths, the closed-form
//! stationary density, a reversible discretization of the generator, and its
//! spectral gap.
//!
//! The diffusion dw = omega_bar(w) dt + sqrt(eps) sigma_bar(w) dB carries the
//! same drift and noise intensity as the slow coordinate of the map. Its
//! stationary density is explicit and its generator is self-adjoint in the
//! density-weighted inner product, so the map side gets two independent
//! references to compare against.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::averaged::AveragedField;
use crate::circle::{arc_contains, dist, signed_delta, wrap, PeriodicCubic};
use crate::rng::stream_rng;
use crate::stats::{SRBHistogram, TRANSITION_DEBOUNCE};
use crate::trig::{cos2pi, sin2pi};

/// Largest grid the dense eigen-solve accepts.
pub const GENERATOR_MAX_GRID: usize = 1 << 12;
/// Smallest grid the gap estimate accepts.
pub const GAP_MIN_GRID: usize = 1 << 10;
/// Largest Euler step the SDE routines accept, in slow-time units.
pub const SDE_MAX_DT: f64 = 1e-3;
/// Allowed defect in the periodicity integral of omega_bar / sigma2.
const PERIODICITY_TOL: f64 = 1e-8;
/// Sample count for positivity scans and the periodicity integral.
const SCAN_POINTS: usize = 1 << 14;
/// Stored-path cap; longer runs stream through em_occupation instead.
const MAX_PATH_STEPS: usize = 1 << 22;
/// Basin-mass disagreement that earns a note in the comparison report.
const MASS_NOTE_GAP: f64 = 0.1;

/// Drift and squared noise intensity of the comparison diffusion, plus the
/// default grid for the generator discretization.
#[derive(Debug, Clone)]
pub struct WFModel {
    pub epsilon: f64,
    /// default generator and density grid
    pub grid: usize,
    pub omega_bar: PeriodicCubic,
    pub sigma2: PeriodicCubic,
}

impl WFModel {
    /// Borrows drift and fiber variance from a tabulated field.
    pub fn from_field(
        field: &AveragedField,
        epsilon: f64,
        grid: usize,
    ) -> Result<WFModel, String> {
        if (field.rescale - 1.0).abs() > 1e-12 {
            return Err("the diffusion lives in raw drive units; pass the unrescaled field".into());
        }
        WFModel::check_shape(epsilon, grid)?;
        Ok(WFModel {
            epsilon,
            grid,
            omega_bar: field.omega_bar.clone(),
            sigma2: field.sigma2.clone(),
        })
    }

    /// Builds a model from closures sampled at m equispaced points.
    pub fn from_fns(
        epsilon: f64,
        grid: usize,
        m: usize,
        omega: impl Fn(f64) -> f64,
        sigma2: impl Fn(f64) -> f64,
    ) -> Result<WFModel, String> {
        if m < 16 {
            return Err("need at least 16 samples".into());
        }
        WFModel::check_shape(epsilon, grid)?;
        let th = |i: usize| i as f64 / m as f64;
        Ok(WFModel {
            epsilon,
            grid,
            omega_bar: PeriodicCubic::new((0..m).map(|i| omega(th(i))).collect()),
            sigma2: PeriodicCubic::new((0..m).map(|i| sigma2(th(i))).collect()),
        })
    }

    fn check_shape(epsilon: f64, grid: usize) -> Result<(), String> {
        if epsilon <= 0.0 {
            return Err("epsilon must be positive".into());
        }
        if grid < 8 || grid > GENERATOR_MAX_GRID {
            return Err(format!("grid must lie in [8, {GENERATOR_MAX_GRID}]"));
        }
        Ok(())
    }

    fn min_sigma2(&self) -> f64 {
        (0..SCAN_POINTS)
            .map(|i| self.sigma2.eval(i as f64 / SCAN_POINTS as f64))
            .fold(f64::INFINITY, f64::min)
    }

    /// int_0^1 omega_bar / sigma2; the stationary density closes up on the
    /// circle only when this vanishes. Simpson rule, periodic wrap.
    fn periodicity_defect(&self) -> f64 {
        let n = SCAN_POINTS;
        let g = |i: usize| {
            let th = (i % n) as f64 / n as f64;
            self.omega_bar.eval(th) / self.sigma2.eval(th)
        };
        let mut acc = 0.0;
        for i in (0..n).step_by(2) {
            acc += g(i) + 4.0 * g(i + 1) + g(i + 2);
        }
        acc / (3.0 * n as f64)
    }
}

/// Cumulative exponent E(theta) = (2/eps) int_0^theta omega_bar/sigma2 on the
/// half-step grid k/(2n), detrended so E(0) = E(1) = 0 exactly. The density
/// is e^E / sigma2 and the flux coefficient sigma2 rho is e^E, both up to one
/// shared constant.
fn exponent_half_grid(model: &WFModel, n: usize) -> Vec<f64> {
    let m = 2 * n;
    let h = 1.0 / m as f64;
    let f: Vec<f64> = (0..=m)
        .map(|k| {
            let th = k as f64 * h;
            2.0 / model.epsilon * model.omega_bar.eval(th) / model.sigma2.eval(th)
        })
        .collect();
    let mut e = Vec::with_capacity(m + 1);
    e.push(0.0);
    let mut acc = 0.0;
    for k in 0..m {
        acc += 0.5 * h * (f[k] + f[k + 1]);
        e.push(acc);
    }
    let seam = e[m];
    for (k, v) in e.iter_mut().enumerate() {
        *v -= k as f64 / m as f64 * seam;
    }
    e
}

/// Closed-form stationary density sampled on a uniform grid, mean value 1.
#[derive(Debug, Clone, Serialize)]
pub struct DensityTable {
    pub epsilon: f64,
    /// grid nodes j/n
    pub theta: Vec<f64>,
    /// density at the nodes, mean 1
    pub rho: Vec<f64>,
}

impl DensityTable {
    /// Node of the density maximum.
    pub fn argmax_theta(&self) -> f64 {
        let mut best = 0usize;
        for j in 1..self.rho.len() {
            if self.rho[j] > self.rho[best] {
                best = j;
            }
        }
        self.theta[best]
    }

    /// Integrated mass of each of `bins` equal arcs; the grid must split
    /// evenly so arc edges land on nodes.
    pub fn bin_masses(&self, bins: usize) -> Result<Vec<f64>, String> {
        let n = self.rho.len();
        if bins == 0 || n % bins != 0 {
            return Err(format!("bin count {bins} must divide the density grid {n}"));
        }
        let stride = n / bins;
        let h = 1.0 / n as f64;
        let mut out = vec![0.0; bins];
        for (k, mass) in out.iter_mut().enumerate() {
            for j in 0..stride {
                let a = self.rho[k * stride + j];
                let b = self.rho[(k * stride + j + 1) % n];
                *mass += 0.5 * h * (a + b);
            }
        }
        Ok(out)
    }

    /// Mass, mean offset, and variance of the density inside the window
    /// |theta - center| < half; offsets are signed around the center.
    pub fn window_moments(&self, center: f64, half: f64) -> (f64, f64, f64) {
        let n = self.rho.len();
        let h = 1.0 / n as f64;
        let mut m0 = 0.0;
        let mut m1 = 0.0;
        for j in 0..n {
            let u = signed_delta(center, self.theta[j]);
            if u.abs() < half {
                m0 += self.rho[j] * h;
                m1 += self.rho[j] * h * u;
            }
        }
        if m0 <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let mean = m1 / m0;
        let mut m2 = 0.0;
        for j in 0..n {
            let u = signed_delta(center, self.theta[j]);
            if u.abs() < half {
                m2 += self.rho[j] * h * (u - mean) * (u - mean);
            }
        }
        (m0, mean, m2 / m0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta,rho\r\n");
        for (th, r) in self.theta.iter().zip(&self.rho) {
            out.push_str(&format!("{th},{r}\r\n"));
        }
        out
    }
}

fn check_density_inputs(model: &WFModel) -> Result<(), String> {
    if model.min_sigma2() <= 0.0 {
        return Err("sigma2 must be positive everywhere for the stationary machinery".into());
    }
    let defect = model.periodicity_defect();
    if defect.abs() > PERIODICITY_TOL {
        return Err(format!(
            "omega_bar/sigma2 integrates to {defect:.3e} over the circle; \
             the density closes up only when it vanishes"
        ));
    }
    Ok(())
}

/// Stationary density of the diffusion, e^E / sigma2 normalized to unit mass.
/// The exponent is shifted against its maximum before exponentiation.
pub fn stationary_density(model: &WFModel, grid: usize) -> Result<DensityTable, String> {
    if grid < 8 || grid > 1 << 16 {
        return Err(format!("density grid must lie in [8, {}]", 1 << 16));
    }
    check_density_inputs(model)?;
    let e = exponent_half_grid(model, grid);
    let log_rho: Vec<f64> = (0..grid)
        .map(|j| e[2 * j] - model.sigma2.eval(j as f64 / grid as f64).ln())
        .collect();
    let lmax = log_rho.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut rho: Vec<f64> = log_rho.iter().map(|v| (v - lmax).exp()).collect();
    let mean = rho.iter().sum::<f64>() / grid as f64;
    for r in &mut rho {
        *r /= mean;
    }
    Ok(DensityTable {
        epsilon: model.epsilon,
        theta: (0..grid).map(|j| j as f64 / grid as f64).collect(),
        rho,
    })
}

/// Symmetrized discrete generator -L in flux form on a periodic grid. The
/// stored matrix is B = S A S^{-1} with S = diag(sqrt rho), symmetric by
/// construction, so reversibility survives discretization exactly.
#[derive(Debug, Clone, Serialize)]
pub struct GeneratorMatrix {
    pub grid: usize,
    pub epsilon: f64,
    /// B_{jj}
    pub diag: Vec<f64>,
    /// B_{j,j+1 mod n}; the last entry is the periodic corner
    pub off: Vec<f64>,
    /// stationary density at the nodes, mean 1
    pub rho: Vec<f64>,
    /// lowest eigenvalues of B, ascending
    pub eigenvalues: Vec<f64>,
}

/// Discretizes -L with midpoint flux coefficients taken from the closed-form
/// density, then solves for the lowest k eigenvalues densely.
pub fn generator_matrix(model: &WFModel, grid: usize, k: usize) -> Result<GeneratorMatrix, String> {
    if grid < 64 || grid > GENERATOR_MAX_GRID {
        return Err(format!("generator grid must lie in [64, {GENERATOR_MAX_GRID}]"));
    }
    if k == 0 || k > grid {
        return Err("ask for between 1 and grid eigenvalues".into());
    }
    check_density_inputs(model)?;

    let n = grid;
    let e = exponent_half_grid(model, n);
    let s2: Vec<f64> = (0..n).map(|j| model.sigma2.eval(j as f64 / n as f64)).collect();
    let c = 0.5 * model.epsilon * (n as f64) * (n as f64);

    // flux form: q = sigma2 rho = e^E at midpoints, rho = e^E / sigma2 at
    // nodes; every entry reduces to exponentials of E differences, so the
    // overall density constant never appears
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n];
    for j in 0..n {
        let left = if j == 0 { 2 * n - 1 } else { 2 * j - 1 };
        diag[j] = c * s2[j] * ((e[2 * j + 1] - e[2 * j]).exp() + (e[left] - e[2 * j]).exp());
        let jp = (j + 1) % n;
        off[j] = -c
            * (s2[j] * s2[jp]).sqrt()
            * (e[2 * j + 1] - 0.5 * (e[2 * j] + e[2 * j + 2])).exp();
    }

    let emax = e.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut rho: Vec<f64> = (0..n).map(|j| (e[2 * j] - emax).exp() / s2[j]).collect();
    let mean = rho.iter().sum::<f64>() / n as f64;
    for r in &mut rho {
        *r /= mean;
    }

    let mut b = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        b[(j, j)] = diag[j];
        let jp = (j + 1) % n;
        b[(j, jp)] = off[j];
        b[(jp, j)] = off[j];
    }
    let eig = SymmetricEigen::new(b);
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev.truncate(k);

    Ok(GeneratorMatrix { grid, epsilon: model.epsilon, diag, off, rho, eigenvalues: ev })
}

impl GeneratorMatrix {
    fn mul_b(&self, v: &[f64]) -> Vec<f64> {
        let n = self.grid;
        (0..n)
            .map(|j| {
                let jm = (j + n - 1) % n;
                let jp = (j + 1) % n;
                self.off[jm] * v[jm] + self.diag[j] * v[j] + self.off[j] * v[jp]
            })
            .collect()
    }

    /// Action of -L on plain functions, A = S^{-1} B S.
    pub fn apply_plain(&self, phi: &[f64]) -> Vec<f64> {
        let s: Vec<f64> = self.rho.iter().map(|r| r.sqrt()).collect();
        let w: Vec<f64> = phi.iter().zip(&s).map(|(p, si)| p * si).collect();
        self.mul_b(&w).iter().zip(&s).map(|(y, si)| y / si).collect()
    }

    /// Action of the plain adjoint of -L on densities, A^T = S B S^{-1}.
    /// The stationary density spans its kernel.
    pub fn apply_adjoint(&self, u: &[f64]) -> Vec<f64> {
        let s: Vec<f64> = self.rho.iter().map(|r| r.sqrt()).collect();
        let w: Vec<f64> = u.iter().zip(&s).map(|(ui, si)| ui / si).collect();
        self.mul_b(&w).iter().zip(&s).map(|(y, si)| y * si).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub grid: usize,
    pub epsilon: f64,
    /// lowest eigenvalue; zero for a sound discretization
    pub lambda0: f64,
    pub gap: f64,
    /// gap at half the grid, behind the stability warning
    pub gap_coarse: f64,
    pub warning: Option<String>,
}

/// Second-lowest eigenvalue of the discrete generator, with a half-grid
/// solve to flag resolution trouble.
pub fn spectral_gap(model: &WFModel, grid: usize) -> Result<GapReport, String> {
    if grid < GAP_MIN_GRID {
        return Err(format!("gap estimates need at least {GAP_MIN_GRID} grid points"));
    }
    let fine = generator_matrix(model, grid, 2)?;
    let coarse = generator_matrix(model, grid / 2, 2)?;
    let lambda0 = fine.eigenvalues[0];
    if lambda0.abs() > 1e-8 {
        return Err(format!("constant zero mode lost: lambda0 = {lambda0:.3e}"));
    }
    let gap = fine.eigenvalues[1];
    let gap_coarse = coarse.eigenvalues[1];
    let rel = (gap - gap_coarse).abs() / gap.abs().max(f64::MIN_POSITIVE);
    let warning =
        (rel > 0.05).then(|| format!("gap moved {:.1}% under grid doubling", 100.0 * rel));
    Ok(GapReport { grid, epsilon: model.epsilon, lambda0, gap, gap_coarse, warning })
}

struct EmWalker<'a> {
    model: &'a WFModel,
    dt: f64,
    /// sqrt(eps dt), the noise scale per step
    root: f64,
    w: f64,
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl EmWalker<'_> {
    fn new(model: &WFModel, theta0: f64, dt: f64, rng: ChaCha8Rng) -> EmWalker<'_> {
        EmWalker { model, dt, root: (model.epsilon * dt).sqrt(), w: wrap(theta0), rng, spare: None }
    }

    fn randn(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1: f64 = self.rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = self.rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        self.spare = Some(r * sin2pi(u2));
        r * cos2pi(u2)
    }

    // interpolation wiggle of sigma2 below a zero level set clamps to zero
    fn step(&mut self) {
        let th = wrap(self.w);
        let sig = self.model.sigma2.eval(th).max(0.0).sqrt();
        self.w += self.model.omega_bar.eval(th) * self.dt + self.root * sig * self.randn();
    }
}

fn check_dt(dt: f64) -> Result<(), String> {
    if !(dt > 0.0) || dt > SDE_MAX_DT {
        return Err(format!("dt must lie in (0, {SDE_MAX_DT}]"));
    }
    Ok(())
}

/// One Euler path of the diffusion, stored on the lifted line.
#[derive(Debug, Clone, Serialize)]
pub struct SdePath {
    pub epsilon: f64,
    /// effective step; the requested step shrinks so the path lands on T
    pub dt: f64,
    pub theta0: f64,
    /// lifted slow coordinate, w[0] = theta0
    pub w: Vec<f64>,
}

impl SdePath {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn theta(&self, i: usize) -> f64 {
        wrap(self.w[i])
    }

    pub fn final_w(&self) -> f64 {
        *self.w.last().expect("paths hold at least the start point")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,w,theta\r\n");
        for (i, &wi) in self.w.iter().enumerate() {
            out.push_str(&format!("{},{},{}\r\n", i as f64 * self.dt, wi, wrap(wi)));
        }
        out
    }
}

/// Euler path over [0, t_final], deterministic per seed.
pub fn simulate_sde(
    model: &WFModel,
    theta0: f64,
    t_final: f64,
    dt: f64,
    seed: u64,
) -> Result<SdePath, String> {
    check_dt(dt)?;
    if !(t_final > 0.0) {
        return Err("t_final must be positive".into());
    }
    let steps = (t_final / dt).ceil().max(1.0);
    if steps > MAX_PATH_STEPS as f64 {
        return Err("path too long to store; stream through em_occupation instead".into());
    }
    let steps = steps as usize;
    let dt = t_final / steps as f64;
    let mut walker = EmWalker::new(model, theta0, dt, stream_rng(seed, "sde-path", 0));
    let mut w = Vec::with_capacity(steps + 1);
    w.push(walker.w);
    for _ in 0..steps {
        walker.step();
        w.push(walker.w);
    }
    Ok(SdePath { epsilon: model.epsilon, dt, theta0: wrap(theta0), w })
}

/// Streaming occupation histogram of one long Euler path, masses summing
/// to 1 over the post-burn-in samples.
pub fn em_occupation(
    model: &WFModel,
    theta0: f64,
    n_steps: u64,
    burn_in: u64,
    dt: f64,
    bins: usize,
    seed: u64,
) -> Result<Vec<f64>, String> {
    if bins < 8 {
        return Err("occupation histogram needs at least 8 bins".into());
    }
    check_dt(dt)?;
    if burn_in >= n_steps {
        return Err("burn-in consumes the whole run".into());
    }
    let mut walker = EmWalker::new(model, theta0, dt, stream_rng(seed, "em-occ", 0));
    let mut counts = vec![0u64; bins];
    for k in 0..n_steps {
        walker.step();
        if k >= burn_in {
            let b = ((wrap(walker.w) * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    let total = (n_steps - burn_in) as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

/// First-passage times between sink neighborhoods B(sink, r_half) along
/// independent Euler paths, pooled, in slow-time units. Entries follow the
/// map-side convention: TRANSITION_DEBOUNCE consecutive in-ball samples,
/// timed entry to entry. Path i starts at sink i mod #sinks.
pub fn sde_passages(
    model: &WFModel,
    sink_thetas: &[f64],
    r_half: f64,
    paths: usize,
    horizon_steps: u64,
    dt: f64,
    seed: u64,
) -> Result<Vec<f64>, String> {
    if sink_thetas.len() < 2 {
        return Err("passage timing needs at least two sinks".into());
    }
    if !(r_half > 0.0) {
        return Err("sink neighborhoods must have positive radius".into());
    }
    check_dt(dt)?;
    if paths == 0 {
        return Err("need at least one path".into());
    }
    let per_path: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let theta0 = sink_thetas[i % sink_thetas.len()];
            let rng = stream_rng(seed, "sde-passage", i as u64);
            let mut walker = EmWalker::new(model, theta0, dt, rng);
            let mut home: Option<usize> = None;
            let mut entered_at = 0u64;
            let mut streak_sink = usize::MAX;
            let mut streak = 0usize;
            let mut out = Vec::new();
            for k in 0..horizon_steps {
                walker.step();
                let th = wrap(walker.w);
                match sink_thetas.iter().position(|&s| dist(th, s) < r_half) {
                    Some(sink) => {
                        if streak_sink == sink {
                            streak += 1;
                        } else {
                            streak_sink = sink;
                            streak = 1;
                        }
                        if streak == TRANSITION_DEBOUNCE && home != Some(sink) {
                            // re-entries into the current home keep the clock
                            // running; only a change of home closes a passage
                            let entry = k + 1 - TRANSITION_DEBOUNCE as u64;
                            if home.is_some() {
                                out.push((entry - entered_at) as f64 * dt);
                            }
                            home = Some(sink);
                            entered_at = entry;
                        }
                    }
                    None => {
                        streak_sink = usize::MAX;
                        streak = 0;
                    }
                }
            }
            out
        })
        .collect();
    Ok(per_path.into_iter().flatten().collect())
}

/// Map-vs-diffusion stationary comparison.
#[derive(Debug, Clone, Serialize)]
pub struct WfComparison {
    pub bins: usize,
    /// L1 distance between theta marginals
    pub l1_theta: f64,
    /// three bootstrap sigmas of the map marginal's own fluctuation
    pub l1_ci: f64,
    pub map_peak: f64,
    pub sde_peak: f64,
    pub peak_distance: f64,
    /// fitted map peak variance over density window variance, per sink
    pub variance_ratios: Vec<f64>,
    pub map_sink_masses: Vec<f64>,
    /// density mass per sink, split at the density minima between sinks
    pub sde_sink_masses: Vec<f64>,
    /// set when the basin splits disagree beyond MASS_NOTE_GAP
    pub mass_note: Option<String>,
}

/// L1 distance between a binned theta marginal and the density's arc masses.
pub fn compare_marginal(marginal: &[f64], table: &DensityTable) -> Result<f64, String> {
    let total: f64 = marginal.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err("marginal must sum to 1".into());
    }
    let masses = table.bin_masses(marginal.len())?;
    Ok(marginal.iter().zip(&masses).map(|(p, q)| (p - q).abs()).sum())
}

// split the circle at the density minima between consecutive sinks and
// integrate each piece; with one sink the whole circle is its basin
fn density_sink_masses(table: &DensityTable, sinks: &[f64]) -> Vec<f64> {
    let k = sinks.len();
    if k <= 1 {
        return vec![1.0; k];
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sinks[a].total_cmp(&sinks[b]));
    let n = table.rho.len();
    let mut bounds = vec![0.0; k];
    for i in 0..k {
        let lo = sinks[order[i]];
        let hi = sinks[order[(i + 1) % k]];
        let mut best = f64::INFINITY;
        let mut best_th = lo;
        for j in 0..n {
            if arc_contains(lo, hi, table.theta[j]) && table.rho[j] < best {
                best = table.rho[j];
                best_th = table.theta[j];
            }
        }
        bounds[i] = best_th;
    }
    let h = 1.0 / n as f64;
    let mut masses = vec![0.0; k];
    for j in 0..n {
        for i in 0..k {
            let prev = bounds[(i + k - 1) % k];
            if arc_contains(prev, bounds[i], table.theta[j]) {
                masses[order[i]] += table.rho[j] * h;
                break;
            }
        }
    }
    let total: f64 = masses.iter().sum();
    if total > 0.0 {
        for m in &mut masses {
            *m /= total;
        }
    }
    masses
}

/// Compares a map stationary histogram against the diffusion's closed-form
/// density built from the same drift and variance. The field identity itself
/// is the caller's responsibility; only epsilon is cross-checked.
pub fn compare_invariant_measures(
    hist: &SRBHistogram,
    model: &WFModel,
) -> Result<WfComparison, String> {
    if (hist.epsilon - model.epsilon).abs() > 1e-12 * model.epsilon {
        return Err("histogram and model disagree on epsilon".into());
    }
    let table = stationary_density(model, model.grid)?;
    let l1_theta = compare_marginal(&hist.theta_marginal, &table)?;

    let mut imax = 0usize;
    for (i, &v) in hist.theta_marginal.iter().enumerate() {
        if v > hist.theta_marginal[imax] {
            imax = i;
        }
    }
    let map_peak = (imax as f64 + 0.5) / hist.bins as f64;
    let sde_peak = table.argmax_theta();

    let variance_ratios: Vec<f64> = hist
        .sink_fits
        .iter()
        .map(|fit| {
            let (_, _, var) = table.window_moments(fit.sink_theta, fit.window_half);
            if var > 0.0 {
                fit.variance / var
            } else {
                f64::INFINITY
            }
        })
        .collect();

    let sinks: Vec<f64> = hist.sink_fits.iter().map(|f| f.sink_theta).collect();
    let sde_sink_masses = density_sink_masses(&table, &sinks);
    let worst = hist
        .sink_masses
        .iter()
        .zip(&sde_sink_masses)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let mass_note = (worst > MASS_NOTE_GAP).then(|| {
        format!(
            "basin masses differ by {worst:.2}: the map's split is pinned by where its \
             cloud started, while the diffusion's split is unique"
        )
    });

    Ok(WfComparison {
        bins: hist.bins,
        l1_theta,
        l1_ci: 3.0 * hist.l1_sigma,
        map_peak,
        sde_peak,
        peak_distance: dist(map_peak, sde_peak),
        variance_ratios,
        map_sink_masses: hist.sink_masses.clone(),
        sde_sink_masses,
        mass_note,
    })
}
