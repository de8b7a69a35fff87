//! Empirical statistics on particle clouds: a local CLT check against the
//! time-integrated variance, correlation decay with bootstrap error bars,
//! stationary histograms with per-sink Gaussian fits, metastable transition
//! timing, and a vertical Wasserstein distance.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::averaged::{AveragedField, ZeroClassification};
use crate::circle::{arc_contains, dist, signed_delta, wrap};
use crate::ensemble::Ensemble;
use crate::rng::{dither_word, stream_rng};
use crate::system::System;

/// Slow-time window where the CLT comparison is meaningful.
pub const LCLT_T_RANGE: (f64, f64) = (0.25, 4.0);
/// Sample size below which the CLT report carries a warning.
pub const LCLT_MIN_PARTICLES: usize = 100_000;
/// Default x-resolution of the vertical Wasserstein distance.
pub const WASSERSTEIN_X_BINS: usize = 256;
/// Consecutive in-neighborhood samples required to count as an entry.
pub const TRANSITION_DEBOUNCE: usize = 10;
/// Quantile probes per x-bin when matching conditional theta laws.
const W1_PROBES: usize = 64;
/// Resamples behind every bootstrap sigma quoted by this module.
const BOOTSTRAP_RESAMPLES: usize = 200;
/// Slow-time steps in the variance quadrature; RK4 and Simpson both leave
/// errors far below the 1e-6 the oracle asks for.
const SIGMA_QUAD_STEPS: usize = 4096;

// ---------------------------------------------------------------- clouds

/// A weighted particle cloud with just enough provenance to keep the
/// per-particle dither streams aligned across successive walks.
#[derive(Clone, Debug)]
pub struct Cloud {
    /// (x, theta, weight)
    pub pts: Vec<(f64, f64, f64)>,
    pub seed: u64,
    /// map steps already taken
    pub step: u64,
}

impl Cloud {
    /// Uniform product measure on the torus, unit total weight.
    pub fn lebesgue(count: usize, seed: u64) -> Cloud {
        let w = 1.0 / count as f64;
        let pts = (0..count)
            .map(|i| {
                let mut rng = stream_rng(seed, "leb-cloud", i as u64);
                (rng.gen::<f64>(), rng.gen::<f64>(), w)
            })
            .collect();
        Cloud { pts, seed, step: 0 }
    }

    pub fn from_ensemble(ens: &Ensemble) -> Cloud {
        Cloud {
            pts: ens.particles.iter().map(|p| (p.x, p.theta, p.weight)).collect(),
            seed: ens.seed,
            step: ens.n,
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.pts.iter().map(|p| p.2).sum()
    }

    /// Advance every particle by bare map steps, arithmetic identical to the
    /// ensemble walker, half-ulp dither always on.
    pub fn advance(&mut self, sys: &System, steps: u64) {
        let seed = self.seed;
        let n0 = self.step;
        let eps = sys.epsilon;
        self.pts.par_iter_mut().enumerate().for_each(|(idx, p)| {
            let (mut x, mut theta, _) = *p;
            for k in 0..steps {
                let d = eps * sys.omega(x, theta);
                let new_theta = wrap(theta + d);
                let mut new_x = wrap(sys.f_lift(x, theta));
                let step_index = n0 + k;
                let word = dither_word(seed, idx as u64, step_index / 64);
                let bit = (word >> (step_index % 64)) & 1;
                new_x += bit as f64 * f64::EPSILON * 0.5;
                if new_x >= 1.0 {
                    new_x -= 1.0;
                }
                theta = new_theta;
                x = new_x;
            }
            p.0 = x;
            p.1 = theta;
        });
        self.step = n0 + steps;
    }
}

// ------------------------------------------------------------- local CLT

#[derive(Debug, Clone, Serialize)]
pub struct LcltReport {
    pub t: f64,
    pub epsilon: f64,
    pub theta0: f64,
    /// time-integrated variance predicted along the averaged flow
    pub sigma2: f64,
    /// empirical second moment of dtheta/sqrt(eps) over sigma2
    pub variance_ratio: f64,
    pub ks_distance: f64,
    pub n_particles: usize,
    pub warning: Option<String>,
}

/// Variance of the rescaled deviation at slow time t, integrated along the
/// averaged flow started at theta0: the instantaneous fiber variance at
/// each point of the path, stretched by the accumulated drift linearization
/// between s and t.
pub fn sigma_t2(field: &AveragedField, theta0: f64, t: f64) -> f64 {
    assert!(t > 0.0, "variance quadrature needs positive slow time");
    let n = SIGMA_QUAD_STEPS;
    let h = t / n as f64;
    // joint RK4 on (theta, J) with J' = d omega_bar(theta); the path is kept
    // lifted so J sees no seam
    let stage = |th: f64| (field.omega_bar.eval(wrap(th)), field.omega_bar.deriv(wrap(th)));
    let mut theta = theta0;
    let mut j_acc = 0.0f64;
    let mut js = Vec::with_capacity(n + 1);
    let mut sig = Vec::with_capacity(n + 1);
    js.push(0.0);
    sig.push(field.sigma2.eval(wrap(theta0)));
    for _ in 0..n {
        let (k1t, k1j) = stage(theta);
        let (k2t, k2j) = stage(theta + 0.5 * h * k1t);
        let (k3t, k3j) = stage(theta + 0.5 * h * k2t);
        let (k4t, k4j) = stage(theta + h * k3t);
        theta += h / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t);
        j_acc += h / 6.0 * (k1j + 2.0 * k2j + 2.0 * k3j + k4j);
        js.push(j_acc);
        sig.push(field.sigma2.eval(wrap(theta)));
    }
    // Simpson over s of exp(2(J_t - J_s)) sigma2(theta_s); the exponent is
    // bounded by 2 t sup|d omega_bar|, no overflow for any built-in drive
    let j_t = js[n];
    let integrand = |k: usize| (2.0 * (j_t - js[k])).exp() * sig[k];
    let mut acc = integrand(0) + integrand(n);
    for k in 1..n {
        acc += integrand(k) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Second moment about zero against the target variance, and the
/// Kolmogorov-Smirnov distance to N(0, sigma2). The prediction is centered,
/// so no empirical mean is removed.
pub fn gaussian_fit_stats(z: &[f64], sigma2: f64) -> (f64, f64) {
    assert!(!z.is_empty() && sigma2 > 0.0);
    let n = z.len();
    let m2 = z.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let mut s = z.to_vec();
    s.sort_unstable_by(|a, b| a.total_cmp(b));
    let sd = sigma2.sqrt();
    let mut ks = 0.0f64;
    for (i, v) in s.iter().enumerate() {
        let c = normal_cdf(v / sd);
        ks = ks.max((c - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - c).abs());
    }
    (m2 / sigma2, ks)
}

/// Compare the evolved deviations dtheta/sqrt(eps) against the Gaussian the
/// averaged flow predicts at the ensemble's current slow time.
pub fn lclt_check(sys: &System, field: &AveragedField, ens: &Ensemble) -> Result<LcltReport, String> {
    if (field.rescale - 1.0).abs() > 1e-12 {
        return Err("the CLT comparison lives in raw drive units; pass the unrescaled field".into());
    }
    if sys.epsilon <= 0.0 {
        return Err("slow time is undefined at epsilon = 0".into());
    }
    if ens.particles.is_empty() {
        return Err("empty ensemble".into());
    }
    let eps = sys.epsilon;
    let t = ens.n as f64 * eps;
    if t < LCLT_T_RANGE.0 || t > LCLT_T_RANGE.1 {
        return Err(format!(
            "slow time t = {t:.4} outside the comparison window [{}, {}]",
            LCLT_T_RANGE.0, LCLT_T_RANGE.1
        ));
    }
    // the theorem's validity floor; for desk-scale epsilon it sits just
    // below 1, so sub-unit times are refused on purpose
    let floor = eps.powf(1.0 / 2000.0);
    if t < floor {
        return Err(format!("slow time t = {t:.4} is below the validity floor {floor:.6}"));
    }
    let theta0 = ens.origin.theta_hat();
    let sigma2 = sigma_t2(field, theta0, t);
    let root_eps = eps.sqrt();
    let z: Vec<f64> = ens.particles.iter().map(|p| p.delta_theta() / root_eps).collect();
    let (variance_ratio, ks_distance) = gaussian_fit_stats(&z, sigma2);
    let warning = (z.len() < LCLT_MIN_PARTICLES)
        .then(|| format!("only {} particles; the KS floor wants {}", z.len(), LCLT_MIN_PARTICLES));
    Ok(LcltReport {
        t,
        epsilon: eps,
        theta0,
        sigma2,
        variance_ratio,
        ks_distance,
        n_particles: z.len(),
        warning,
    })
}

// ------------------------------------------------------ correlation decay

/// Closed-form observables with known sup-norms.
#[derive(Clone, Debug, Serialize)]
pub enum Observable {
    One,
    /// cos^4 taper on a theta arc, value 1 at the center, 0 outside
    BumpTheta { center: f64, half_width: f64 },
    CosTheta,
    CosX,
    Scaled { factor: f64, inner: Box<Observable> },
}

impl Observable {
    pub fn eval(&self, x: f64, theta: f64) -> f64 {
        match self {
            Observable::One => 1.0,
            Observable::BumpTheta { center, half_width } => {
                let d = dist(theta, *center);
                if d >= *half_width {
                    0.0
                } else {
                    let c = (std::f64::consts::FRAC_PI_2 * d / half_width).cos();
                    c.powi(4)
                }
            }
            Observable::CosTheta => crate::trig::cos2pi(theta),
            Observable::CosX => crate::trig::cos2pi(x),
            Observable::Scaled { factor, inner } => factor * inner.eval(x, theta),
        }
    }

    pub fn sup(&self) -> f64 {
        match self {
            Observable::One => 1.0,
            Observable::BumpTheta { .. } => 1.0,
            Observable::CosTheta | Observable::CosX => 1.0,
            Observable::Scaled { factor, inner } => factor.abs() * inner.sup(),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Observable::One => "1".into(),
            Observable::BumpTheta { center, half_width } => {
                format!("bump(theta; {center}, {half_width})")
            }
            Observable::CosTheta => "cos(2 pi theta)".into(),
            Observable::CosX => "cos(2 pi x)".into(),
            Observable::Scaled { factor, inner } => format!("{factor} * {}", inner.describe()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DecayStatus {
    /// tail window fitted
    Fitted,
    /// nothing above noise at positive lags
    AllNoise,
    /// above noise at the peak, below noise one lag later; the rate is the
    /// resolution bound, not a fit
    TooFast,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayFit {
    pub observables: String,
    pub lags: Vec<usize>,
    pub corr: Vec<f64>,
    /// bootstrap sigma per lag
    pub sigma: Vec<f64>,
    /// fitted decay rate per map step, 0 when all-noise
    pub rate: f64,
    /// lag range the fit used
    pub fit_window: (usize, usize),
    pub r2: f64,
    pub status: DecayStatus,
    /// long-run tail estimate of the B average, the one the correlations use
    pub mu_tail: f64,
    /// ensemble average of B at the final step
    pub mu_final: f64,
    pub mu_note: Option<String>,
}

impl DecayFit {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lag,corr,sigma\r\n");
        for j in 0..self.lags.len() {
            out.push_str(&format!("{},{:.12e},{:.12e}\r\n", self.lags[j], self.corr[j], self.sigma[j]));
        }
        out
    }
}

/// Geometric lag grid: every lag up to 8, then 30% steps, n_max included.
fn decay_lags(n_max: usize) -> Vec<usize> {
    let mut lags: Vec<usize> = (0..=8.min(n_max)).collect();
    let mut v = 8.0f64;
    while (v * 1.3).round() < n_max as f64 {
        v *= 1.3;
        lags.push(v.round() as usize);
    }
    if *lags.last().unwrap() != n_max {
        lags.push(n_max);
    }
    lags.dedup();
    lags
}

fn line_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}

/// Time correlation of A against B along the flow, started from the uniform
/// measure: mean(A_0 B_n) - mean(A_0) mu(B), with mu(B) taken from the tail
/// of the same run. Bootstrap sigmas resample particles.
pub fn correlation_decay(
    sys: &System,
    a: &Observable,
    b: &Observable,
    n_max: usize,
    count: usize,
    seed: u64,
) -> Result<DecayFit, String> {
    if n_max < 16 {
        return Err("lag horizon must be at least 16 steps".into());
    }
    if count < 64 {
        return Err("correlation estimates need at least 64 particles".into());
    }
    let lags = decay_lags(n_max);
    let n_lags = lags.len();
    let tail_start = n_max - n_max / 4;
    let eps = sys.epsilon;

    struct Row {
        a0: f64,
        tail: f64,
        b_at: Vec<f64>,
    }
    let rows: Vec<Row> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, "corr-init", i as u64);
            let mut x: f64 = rng.gen();
            let mut theta: f64 = rng.gen();
            let a0 = a.eval(x, theta);
            let mut b_at = Vec::with_capacity(n_lags);
            let mut tail_acc = 0.0f64;
            let mut next = 0;
            for k in 0..=n_max {
                if next < n_lags && lags[next] == k {
                    b_at.push(b.eval(x, theta));
                    next += 1;
                }
                if k >= tail_start {
                    tail_acc += b.eval(x, theta);
                }
                if k == n_max {
                    break;
                }
                let d = eps * sys.omega(x, theta);
                let new_theta = wrap(theta + d);
                let mut new_x = wrap(sys.f_lift(x, theta));
                let word = dither_word(seed, i as u64, k as u64 / 64);
                let bit = (word >> (k as u64 % 64)) & 1;
                new_x += bit as f64 * f64::EPSILON * 0.5;
                if new_x >= 1.0 {
                    new_x -= 1.0;
                }
                theta = new_theta;
                x = new_x;
            }
            Row { a0, tail: tail_acc / (n_max - tail_start + 1) as f64, b_at }
        })
        .collect();

    let nf = count as f64;
    let mean_a0 = rows.iter().map(|r| r.a0).sum::<f64>() / nf;
    let mu_tail = rows.iter().map(|r| r.tail).sum::<f64>() / nf;
    let mu_final = rows.iter().map(|r| *r.b_at.last().unwrap()).sum::<f64>() / nf;
    let corr: Vec<f64> = (0..n_lags)
        .map(|j| rows.iter().map(|r| r.a0 * r.b_at[j]).sum::<f64>() / nf - mean_a0 * mu_tail)
        .collect();

    // bootstrap over particles, deterministic streams per resample
    let boot: Vec<(Vec<f64>, f64)> = (0..BOOTSTRAP_RESAMPLES)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, "corr-boot", r as u64);
            let mut sa = 0.0f64;
            let mut st = 0.0f64;
            let mut sp = vec![0.0f64; n_lags];
            for _ in 0..count {
                let i = rng.gen_range(0..count);
                sa += rows[i].a0;
                st += rows[i].tail;
                for (j, acc) in sp.iter_mut().enumerate() {
                    *acc += rows[i].a0 * rows[i].b_at[j];
                }
            }
            let c: Vec<f64> = sp.iter().map(|p| p / nf - (sa / nf) * (st / nf)).collect();
            (c, st / nf)
        })
        .collect();
    let sigma: Vec<f64> = (0..n_lags)
        .map(|j| {
            let m = boot.iter().map(|(c, _)| c[j]).sum::<f64>() / BOOTSTRAP_RESAMPLES as f64;
            let v = boot.iter().map(|(c, _)| (c[j] - m) * (c[j] - m)).sum::<f64>()
                / (BOOTSTRAP_RESAMPLES - 1) as f64;
            v.sqrt()
        })
        .collect();
    let mu_sigma = {
        let m = boot.iter().map(|(_, t)| t).sum::<f64>() / BOOTSTRAP_RESAMPLES as f64;
        let v = boot.iter().map(|(_, t)| (t - m) * (t - m)).sum::<f64>()
            / (BOOTSTRAP_RESAMPLES - 1) as f64;
        v.sqrt()
    };
    let mu_note = ((mu_tail - mu_final).abs() > 3.0 * mu_sigma).then(|| {
        format!("tail ({mu_tail:.6}) and final-step ({mu_final:.6}) B averages differ beyond noise")
    });

    let observables = format!("{} vs {}", a.describe(), b.describe());
    // the fit only ever sees lags above the noise floor
    let above: Vec<usize> =
        (0..n_lags).filter(|&j| lags[j] >= 1 && corr[j].abs() > 3.0 * sigma[j]).collect();
    if above.is_empty() {
        return Ok(DecayFit {
            observables,
            lags,
            corr,
            sigma,
            rate: 0.0,
            fit_window: (0, 0),
            r2: 0.0,
            status: DecayStatus::AllNoise,
            mu_tail,
            mu_final,
            mu_note,
        });
    }
    let peak = *above
        .iter()
        .max_by(|&&p, &&q| corr[p].abs().total_cmp(&corr[q].abs()))
        .unwrap();
    let last = *above.last().unwrap();
    if lags[last] == n_max && corr[last].abs() > corr[peak].abs() / std::f64::consts::E {
        return Err(format!(
            "no decay detected: |corr| = {:.3e} at lag {} is still above noise and within one \
             e-fold of the peak {:.3e}",
            corr[last].abs(),
            n_max,
            corr[peak].abs()
        ));
    }
    let window: Vec<usize> = above.iter().copied().filter(|&j| j >= peak).collect();
    if window.len() < 2 {
        // decayed below noise within one lag spacing; report the resolution
        // bound at the peak instead of a fit
        let j = window[0];
        let gap = if j + 1 < n_lags { (lags[j + 1] - lags[j]) as f64 } else { 1.0 };
        let rate = (corr[j].abs() / (3.0 * sigma[j]).max(f64::MIN_POSITIVE)).ln().max(0.0) / gap;
        return Ok(DecayFit {
            observables,
            lags: lags.clone(),
            corr,
            sigma,
            rate,
            fit_window: (lags[j], lags[j]),
            r2: 0.0,
            status: DecayStatus::TooFast,
            mu_tail,
            mu_final,
            mu_note,
        });
    }
    let xs: Vec<f64> = window.iter().map(|&j| lags[j] as f64).collect();
    let ys: Vec<f64> = window.iter().map(|&j| corr[j].abs().ln()).collect();
    let (slope, _, r2) = line_fit(&xs, &ys);
    Ok(DecayFit {
        observables,
        lags: lags.clone(),
        corr,
        sigma,
        rate: (-slope).max(0.0),
        fit_window: (lags[window[0]], lags[*window.last().unwrap()]),
        r2,
        status: DecayStatus::Fitted,
        mu_tail,
        mu_final,
        mu_note,
    })
}

// ---------------------------------------------------------- SRB histogram

#[derive(Debug, Clone, Serialize)]
pub struct SinkFit {
    pub sink_theta: f64,
    pub center: f64,
    pub variance: f64,
    /// eps sigma2(sink) / (2 |slope|), the long-time limit of the
    /// integrated variance
    pub predicted_variance: f64,
    pub mass_in_window: f64,
    pub window_half: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SRBHistogram {
    pub bins: usize,
    pub burn_in: u64,
    pub epsilon: f64,
    /// row-major mass over (x bin, theta bin), sums to 1
    pub counts: Vec<f64>,
    pub theta_marginal: Vec<f64>,
    /// mass per forward basin, one entry per sink, sums to 1
    pub sink_masses: Vec<f64>,
    pub sink_fits: Vec<SinkFit>,
    /// mass outside every sink window
    pub outside_mass: f64,
    /// bootstrap scale of the L1 fluctuation of the theta marginal
    pub l1_sigma: f64,
    /// which peak-variance convention the fits compare against
    pub variance_convention: &'static str,
}

const VARIANCE_CONVENTION: &str = "peak variance is compared against eps*sigma2/(2|slope|), the \
     long-time limit of the integrated variance; the plain eps*sigma2 figure seen in informal \
     descriptions overstates the width by the 2|slope| factor and is not used";

impl SRBHistogram {
    /// L1 distance between theta marginals.
    pub fn l1_theta(&self, other: &SRBHistogram) -> Result<f64, String> {
        if self.bins != other.bins {
            return Err("histograms use different bin counts".into());
        }
        Ok(self
            .theta_marginal
            .iter()
            .zip(&other.theta_marginal)
            .map(|(p, q)| (p - q).abs())
            .sum())
    }
}

/// Warn when two independently seeded histograms disagree beyond noise.
pub fn srb_seed_note(a: &SRBHistogram, b: &SRBHistogram) -> Result<Option<String>, String> {
    let l1 = a.l1_theta(b)?;
    let thr = 3.0 * (a.l1_sigma * a.l1_sigma + b.l1_sigma * b.l1_sigma).sqrt();
    Ok((l1 > thr).then(|| {
        format!("theta marginals from different seeds disagree: L1 = {l1:.4} > {thr:.4}")
    }))
}

/// Burn the cloud past the relaxation scale, then histogram the stationary
/// state and fit a Gaussian to the marginal near each sink.
pub fn srb_histogram(
    sys: &System,
    field: &AveragedField,
    class: &ZeroClassification,
    cloud: &Cloud,
    burn_in: u64,
    bins: usize,
) -> Result<SRBHistogram, String> {
    if bins < 8 {
        return Err("histogram needs at least 8 bins per axis".into());
    }
    if (field.rescale - 1.0).abs() > 1e-12 {
        return Err("sink fits live in raw drive units; pass the unrescaled field".into());
    }
    let eps = sys.epsilon;
    if eps <= 0.0 {
        return Err("the stationary state is trivial at epsilon = 0".into());
    }
    let relax = eps.recip() * eps.recip().ln();
    if (burn_in as f64) < relax {
        return Err(format!(
            "burn-in {burn_in} is below the relaxation scale {} at epsilon = {eps}",
            relax.ceil()
        ));
    }
    if cloud.pts.is_empty() {
        return Err("empty cloud".into());
    }

    let mut c = cloud.clone();
    c.advance(sys, burn_in);
    let w_total = c.total_weight();
    if w_total <= 0.0 {
        return Err("cloud carries no mass".into());
    }

    let mut counts = vec![0.0f64; bins * bins];
    let mut theta_marginal = vec![0.0f64; bins];
    let bin_of = |u: f64| ((u * bins as f64) as usize).min(bins - 1);
    for &(x, theta, w) in &c.pts {
        let bx = bin_of(wrap(x));
        let bt = bin_of(wrap(theta));
        counts[bx * bins + bt] += w / w_total;
        theta_marginal[bt] += w / w_total;
    }

    // with one sink the basin arc closes on itself and means the full circle
    let mut sink_masses = vec![0.0f64; class.sinks.len()];
    if class.sinks.len() == 1 {
        sink_masses[0] = w_total;
    } else {
        for &(_, theta, w) in &c.pts {
            for (k, &(lo, hi)) in class.basins.iter().enumerate() {
                if arc_contains(lo, hi, theta) {
                    sink_masses[k] += w;
                    break;
                }
            }
        }
    }
    let mass_sum: f64 = sink_masses.iter().sum();
    if mass_sum > 0.0 {
        for m in &mut sink_masses {
            *m /= mass_sum;
        }
    }

    // per-sink moment fit over a window wide enough to hold the peak but
    // clear of the neighboring sources
    let mut sink_fits = Vec::with_capacity(class.sinks.len());
    let mut inside = 0.0f64;
    for z in &class.sinks {
        let predicted_variance = eps * field.sigma2.eval(z.theta) / (2.0 * z.slope.abs());
        let d_src =
            class.sources.iter().map(|s| dist(z.theta, s.theta)).fold(f64::INFINITY, f64::min);
        let window_half = (4.0 * predicted_variance.sqrt()).min(0.8 * d_src);
        let mut m0 = 0.0f64;
        let mut m1 = 0.0f64;
        for &(_, theta, w) in &c.pts {
            let u = signed_delta(z.theta, theta);
            if u.abs() < window_half {
                m0 += w;
                m1 += w * u;
            }
        }
        let center_off = if m0 > 0.0 { m1 / m0 } else { 0.0 };
        let mut m2 = 0.0f64;
        for &(_, theta, w) in &c.pts {
            let u = signed_delta(z.theta, theta);
            if u.abs() < window_half {
                m2 += w * (u - center_off) * (u - center_off);
            }
        }
        let mass_in_window = m0 / w_total;
        inside += mass_in_window;
        sink_fits.push(SinkFit {
            sink_theta: z.theta,
            center: wrap(z.theta + center_off),
            variance: if m0 > 0.0 { m2 / m0 } else { 0.0 },
            predicted_variance,
            mass_in_window,
            window_half,
        });
    }

    // bootstrap the marginal's own L1 fluctuation scale
    let probs: Vec<f64> = c.pts.iter().map(|p| p.2 / w_total).collect();
    let n_pts = c.pts.len();
    let l1s: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(cloud.seed, "srb-boot", r as u64);
            let mut marg = vec![0.0f64; bins];
            let mut total = 0.0f64;
            for _ in 0..n_pts {
                let i = rng.gen_range(0..n_pts);
                marg[bin_of(wrap(c.pts[i].1))] += probs[i];
                total += probs[i];
            }
            marg.iter()
                .zip(&theta_marginal)
                .map(|(p, q)| (p / total - q).abs())
                .sum::<f64>()
        })
        .collect();
    let l1_sigma = l1s.iter().sum::<f64>() / BOOTSTRAP_RESAMPLES as f64;

    Ok(SRBHistogram {
        bins,
        burn_in,
        epsilon: eps,
        counts,
        theta_marginal,
        sink_masses,
        sink_fits,
        outside_mass: (1.0 - inside).max(0.0),
        l1_sigma,
        variance_convention: VARIANCE_CONVENTION,
    })
}

// ----------------------------------------------------------- metastability

#[derive(Debug, Clone, Serialize)]
pub struct TransitionRow {
    pub epsilon: f64,
    pub transitions: usize,
    /// mean first-passage in map steps, entry event to entry event
    pub mean_passage: Option<f64>,
    /// true when some particle saw no transition inside the horizon
    pub censored: bool,
    pub horizon: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegressionLine {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetastabilityReport {
    pub rows: Vec<TransitionRow>,
    pub histograms: Vec<SRBHistogram>,
    /// ln(mean passage) against 1/eps, over rows that saw transitions
    pub passage_regression: Option<RegressionLine>,
    pub count: usize,
}

/// Per-epsilon stationary histograms plus first-passage timing between the
/// sink neighborhoods B(sink, r_minus/2). An entry needs TRANSITION_DEBOUNCE
/// consecutive in-ball samples; a passage is timed from one change of home
/// ball to the next, so re-entries into the current home keep the clock
/// running and the mean reflects the waiting time, not the final excursion.
pub fn metastability_report(
    base: &System,
    field: &AveragedField,
    class: &ZeroClassification,
    count: usize,
    horizon: u64,
    eps_list: &[f64],
    seed: u64,
    bins: usize,
) -> Result<MetastabilityReport, String> {
    if class.n_z < 2 {
        return Err(format!("metastability needs at least two sinks, found {}", class.n_z));
    }
    if eps_list.is_empty() {
        return Err("empty epsilon sweep".into());
    }
    let r_half = class.r_minus / 2.0;
    if r_half <= 0.0 {
        return Err("sink neighborhoods have no radius; classify on a normalized field".into());
    }
    let sink_thetas: Vec<f64> = class.sinks.iter().map(|z| z.theta).collect();

    let mut rows = Vec::with_capacity(eps_list.len());
    let mut histograms = Vec::with_capacity(eps_list.len());
    for (i, &eps) in eps_list.iter().enumerate() {
        if eps <= 0.0 {
            return Err("sweep epsilons must be positive".into());
        }
        let sys = base.with_epsilon(eps);
        let cloud_seed = crate::rng::stream_key(seed, "meta-cloud", i as u64);
        let cloud = Cloud::lebesgue(count, cloud_seed);
        let burn = (eps.recip() * eps.recip().ln()).ceil() as u64;
        histograms.push(srb_histogram(&sys, field, class, &cloud, burn, bins)?);

        // independent walk for passage timing, sampled every map step
        let passages: Vec<Vec<u64>> = cloud
            .pts
            .par_iter()
            .enumerate()
            .map(|(idx, &(x0, theta0, _))| {
                let mut x = x0;
                let mut theta = theta0;
                let mut home: Option<usize> = None;
                let mut entered_at = 0u64;
                let mut streak_sink = usize::MAX;
                let mut streak = 0usize;
                let mut out = Vec::new();
                for k in 0..horizon {
                    let d = eps * sys.omega(x, theta);
                    let new_theta = wrap(theta + d);
                    let mut new_x = wrap(sys.f_lift(x, theta));
                    let word = dither_word(cloud_seed, idx as u64, k / 64);
                    let bit = (word >> (k % 64)) & 1;
                    new_x += bit as f64 * f64::EPSILON * 0.5;
                    if new_x >= 1.0 {
                        new_x -= 1.0;
                    }
                    theta = new_theta;
                    x = new_x;
                    match sink_thetas.iter().position(|&s| dist(theta, s) < r_half) {
                        Some(sink) => {
                            if streak_sink == sink {
                                streak += 1;
                            } else {
                                streak_sink = sink;
                                streak = 1;
                            }
                            if streak == TRANSITION_DEBOUNCE && home != Some(sink) {
                                let entry = k + 1 - TRANSITION_DEBOUNCE as u64;
                                if home.is_some() {
                                    out.push(entry - entered_at);
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

        let all: Vec<u64> = passages.iter().flatten().copied().collect();
        let censored = passages.iter().any(|p| p.is_empty());
        rows.push(TransitionRow {
            epsilon: eps,
            transitions: all.len(),
            mean_passage: (!all.is_empty())
                .then(|| all.iter().sum::<u64>() as f64 / all.len() as f64),
            censored,
            horizon,
        });
    }

    let fitted: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.mean_passage.map(|m| (r.epsilon.recip(), m.ln())))
        .collect();
    let passage_regression = (fitted.len() >= 2).then(|| {
        let xs: Vec<f64> = fitted.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = fitted.iter().map(|p| p.1).collect();
        let (slope, intercept, r2) = line_fit(&xs, &ys);
        RegressionLine { slope, intercept, r2 }
    });

    Ok(MetastabilityReport { rows, histograms, passage_regression, count })
}

// ----------------------------------------------------- vertical Wasserstein

/// Distance with the vertical cost: 1 whenever x bins differ, circle
/// distance in theta inside a shared bin, matched through conditional
/// quantiles. Always lands in [0, 1].
pub fn wasserstein_vertical(a: &Cloud, b: &Cloud, x_bins: usize) -> Result<f64, String> {
    if x_bins == 0 {
        return Err("need at least one x bin".into());
    }
    let build = |c: &Cloud| -> Result<Vec<Vec<(f64, f64)>>, String> {
        let w_total = c.total_weight();
        if c.pts.is_empty() || w_total <= 0.0 {
            return Err("clouds must carry mass".into());
        }
        let mut bins: Vec<Vec<(f64, f64)>> = vec![Vec::new(); x_bins];
        for &(x, theta, w) in &c.pts {
            let bx = ((wrap(x) * x_bins as f64) as usize).min(x_bins - 1);
            bins[bx].push((wrap(theta), w / w_total));
        }
        for bin in &mut bins {
            bin.sort_unstable_by(|p, q| p.0.total_cmp(&q.0));
        }
        Ok(bins)
    };
    let pa = build(a)?;
    let pb = build(b)?;

    let quantile = |bin: &[(f64, f64)], cum: &[f64], u: f64| -> f64 {
        let target = u * cum[cum.len() - 1];
        let k = cum.partition_point(|&c| c < target).min(bin.len() - 1);
        bin[k].0
    };

    let mut matched = 0.0f64;
    let mut cost = 0.0f64;
    for i in 0..x_bins {
        let wa: f64 = pa[i].iter().map(|p| p.1).sum();
        let wb: f64 = pb[i].iter().map(|p| p.1).sum();
        if wa <= 0.0 || wb <= 0.0 {
            continue;
        }
        let cum_a: Vec<f64> = pa[i]
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p.1;
                Some(*acc)
            })
            .collect();
        let cum_b: Vec<f64> = pb[i]
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p.1;
                Some(*acc)
            })
            .collect();
        let m = wa.min(wb);
        let mut bin_cost = 0.0f64;
        for k in 0..W1_PROBES {
            let u = (k as f64 + 0.5) / W1_PROBES as f64;
            bin_cost += dist(quantile(&pa[i], &cum_a, u), quantile(&pb[i], &cum_b, u));
        }
        cost += m * bin_cost / W1_PROBES as f64;
        matched += m;
    }
    // unmatched mass sits in different x bins and pays the full unit cost
    Ok((cost + (1.0 - matched)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::averaged::{classify_zeros, tabulate_field};
    use crate::center::cone_constants;
    use crate::ensemble::{evolve, sample_standard_pair, PairConstants, StandardPairSpec};
    use crate::system::Family;
    use proptest::prelude::*;
    use rand::Rng;
    use std::sync::OnceLock;

    fn one_sink_sys(eps: f64) -> System {
        System::new(Family::one_sink(), eps).unwrap()
    }

    fn one_sink_field() -> &'static AveragedField {
        static FIELD: OnceLock<AveragedField> = OnceLock::new();
        FIELD.get_or_init(|| tabulate_field(&one_sink_sys(1e-3), 256, 2048).unwrap())
    }

    fn nonergodic_field() -> &'static AveragedField {
        static FIELD: OnceLock<AveragedField> = OnceLock::new();
        FIELD.get_or_init(|| {
            let sys = System::new(Family::two_sink_nonergodic(), 0.02).unwrap();
            tabulate_field(&sys, 256, 2048).unwrap()
        })
    }

    fn evolved_pair(sys: &System, theta0: f64, count: usize, steps: usize, seed: u64) -> Ensemble {
        let consts = PairConstants::for_system(sys);
        let spec = StandardPairSpec::flat(sys, theta0, 0.4, 0.4 + consts.delta, consts).unwrap();
        let ens = sample_standard_pair(&spec, count, seed).unwrap();
        let cones = cone_constants(sys, 1.0 / 16.0).unwrap();
        let field = one_sink_field();
        evolve(sys, field, &cones, ens, steps, steps, true).unwrap().0
    }

    #[test]
    fn quadrature_variance_matches_the_closed_form_at_the_sink() {
        // at the sink the path is constant, so the integral collapses to
        // sigma2 (1 - e^{-2|slope|t}) / (2|slope|) with the interpolant's
        // own slope and fiber variance
        let field = one_sink_field();
        let slope = field.omega_bar.deriv(0.5);
        let s2 = field.sigma2.eval(0.5);
        assert!(slope < -0.99 && slope > -1.01);
        for &t in &[0.25, 1.0, 4.0] {
            let want = s2 * (1.0 - (2.0 * slope * t).exp()) / (-2.0 * slope);
            let got = sigma_t2(field, 0.5, t);
            assert!(
                (got - want).abs() < 1e-6,
                "t = {t}: quadrature {got} vs closed form {want}"
            );
        }
    }

    #[test]
    fn synthetic_gaussian_passes_the_self_test() {
        let sigma2 = 1.7f64;
        let sd = sigma2.sqrt();
        let mut rng = stream_rng(20260815, "lclt-synth", 0);
        let z: Vec<f64> = (0..100_000)
            .map(|_| {
                let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.gen();
                sd * (-2.0 * u1.ln()).sqrt() * crate::trig::cos2pi(u2)
            })
            .collect();
        let (ratio, ks) = gaussian_fit_stats(&z, sigma2);
        assert!((ratio - 1.0).abs() < 0.02, "variance ratio {ratio}");
        assert!(ks <= 0.005, "KS distance {ks}");
    }

    #[test]
    fn lclt_rejects_out_of_window_times() {
        let sys = one_sink_sys(0.01);
        let field = one_sink_field();
        let long = evolved_pair(&sys, 0.5, 64, 401, 7);
        let err = lclt_check(&sys, field, &long).unwrap_err();
        assert!(err.contains("comparison window"), "{err}");
        // t = 0.25 clears the window but sits below the validity floor,
        // which is just under 1 for desk-scale epsilon
        let quarter = evolved_pair(&sys, 0.5, 64, 25, 7);
        let err = lclt_check(&sys, field, &quarter).unwrap_err();
        assert!(err.contains("validity floor"), "{err}");
        let frozen = System::new(Family::one_sink(), 0.0).unwrap();
        assert!(lclt_check(&frozen, field, &quarter).is_err());
    }

    #[test]
    fn map_deviations_match_the_predicted_gaussian_and_mirror() {
        // t = 1 at the sink; the mirrored drive sin -> sin, hat -> -hat
        // under theta -> -theta shares the x path bit for bit, so the two
        // reports should agree to floating noise
        let eps = 2e-3;
        let steps = 500;
        let count = 4096;
        let sys = one_sink_sys(eps);
        let field = one_sink_field();
        let ens = evolved_pair(&sys, 0.5, count, steps, 11);
        let report = lclt_check(&sys, field, &ens).unwrap();
        assert!(report.warning.is_some(), "small-sample warning expected");
        assert!(
            report.variance_ratio > 0.85 && report.variance_ratio < 1.15,
            "variance ratio {}",
            report.variance_ratio
        );
        assert!(report.ks_distance < 0.05, "KS {}", report.ks_distance);

        let mirror_family = Family::SkewDoubling {
            bar: crate::system::BarShape::SinOverTwoPi,
            hat: crate::system::HatShape::Cos { amp: -3.0 },
        };
        let msys = System::new(mirror_family, eps).unwrap();
        let mfield = tabulate_field(&msys, 256, 2048).unwrap();
        let consts = PairConstants::for_system(&msys);
        let spec = StandardPairSpec::flat(&msys, 0.5, 0.4, 0.4 + consts.delta, consts).unwrap();
        let mens = sample_standard_pair(&spec, count, 11).unwrap();
        let cones = cone_constants(&msys, 1.0 / 16.0).unwrap();
        let mens = evolve(&msys, &mfield, &cones, mens, steps, steps, true).unwrap().0;
        let mreport = lclt_check(&msys, &mfield, &mens).unwrap();
        assert!(
            (report.variance_ratio - mreport.variance_ratio).abs() < 0.02,
            "mirror ratio {} vs {}",
            report.variance_ratio,
            mreport.variance_ratio
        );
        assert!((report.ks_distance - mreport.ks_distance).abs() < 0.02);
        // deviations flip sign under the mirror
        let med = |ens: &Ensemble| {
            let mut d: Vec<f64> = ens.particles.iter().map(|p| p.delta_theta()).collect();
            d.sort_unstable_by(|a, b| a.total_cmp(b));
            d[d.len() / 2]
        };
        assert!((med(&ens) + med(&mens)).abs() < 0.01);
    }

    #[test]
    fn constant_observables_are_exactly_uncorrelated() {
        let sys = one_sink_sys(0.01);
        let fit =
            correlation_decay(&sys, &Observable::One, &Observable::One, 64, 512, 3).unwrap();
        assert_eq!(fit.status, DecayStatus::AllNoise);
        assert_eq!(fit.rate, 0.0);
        assert!(fit.corr.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn source_mass_stays_anticorrelated_with_the_sink_then_relaxes() {
        // supports separated by half the circle: while the source mass is
        // in transit the product term vanishes, so the correlation pins at
        // -mean(A) mu(B); it relaxes on the slow scale, hence a small rate
        let eps = 0.01;
        let sys = one_sink_sys(eps);
        let a = Observable::BumpTheta { center: 0.0, half_width: 0.08 };
        let b = Observable::BumpTheta { center: 0.5, half_width: 0.08 };
        let fit = correlation_decay(&sys, &a, &b, 1200, 4096, 5).unwrap();
        assert_eq!(fit.status, DecayStatus::Fitted);
        // above noise and negative at lag ~ 0.5/eps
        let j = fit.lags.iter().position(|&l| l >= 50).unwrap();
        assert!(fit.corr[j] < 0.0, "corr at lag {} is {}", fit.lags[j], fit.corr[j]);
        assert!(fit.corr[j].abs() > 3.0 * fit.sigma[j]);
        assert!(fit.rate > 0.0 && fit.rate <= 10.0 * eps, "rate {}", fit.rate);
    }

    #[test]
    fn correlation_is_linear_in_the_observable() {
        let sys = one_sink_sys(0.01);
        let a = Observable::BumpTheta { center: 0.2, half_width: 0.1 };
        let doubled =
            Observable::Scaled { factor: 2.0, inner: Box::new(a.clone()) };
        let b = Observable::BumpTheta { center: 0.5, half_width: 0.1 };
        let r1 = correlation_decay(&sys, &a, &b, 128, 256, 9);
        let r2 = correlation_decay(&sys, &doubled, &b, 128, 256, 9);
        match (r1, r2) {
            (Ok(f1), Ok(f2)) => {
                // doubling is exact in binary floating point; the rate goes
                // through a log, which reorders roundings
                for (c1, c2) in f1.corr.iter().zip(&f2.corr) {
                    assert_eq!(*c2, 2.0 * c1);
                }
                assert!((f1.rate - f2.rate).abs() <= 1e-9 * f1.rate.abs().max(1e-30));
                assert_eq!(f1.fit_window, f2.fit_window);
            }
            (Err(e1), Err(e2)) => assert_eq!(e1.split(':').next(), e2.split(':').next()),
            (r1, r2) => panic!("scaling changed the outcome: {r1:?} vs {r2:?}"),
        }
    }

    #[test]
    fn blocked_family_shows_no_transitions() {
        let base = System::new(Family::two_sink_nonergodic(), 0.02).unwrap();
        let field = nonergodic_field();
        let class = classify_zeros(field, 1e-6).unwrap();
        assert_eq!(class.n_z, 2);
        let report =
            metastability_report(&base, field, &class, 48, 60_000, &[0.02], 17, 32).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert_eq!(row.transitions, 0);
        assert!(row.mean_passage.is_none());
        assert!(row.censored);
        assert!(report.passage_regression.is_none());
        // Lebesgue start splits evenly between the two basins and stays there
        let masses = &report.histograms[0].sink_masses;
        assert_eq!(masses.len(), 2);
        assert!(masses.iter().all(|&p| p > 0.3 && p < 0.7), "{masses:?}");
        let sum: f64 = masses.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        // a single sink refuses the metastability machinery
        let one = classify_zeros(one_sink_field(), 1e-6).unwrap();
        let sys = one_sink_sys(0.02);
        assert!(metastability_report(&sys, one_sink_field(), &one, 8, 100, &[0.02], 1, 16)
            .is_err());
    }

    #[test]
    fn stationary_marginal_is_a_gaussian_peak_at_the_sink() {
        let eps = 2e-3;
        let sys = one_sink_sys(eps);
        let field = one_sink_field();
        let class = classify_zeros(field, 1e-6).unwrap();
        let cloud = Cloud::lebesgue(2048, 23);
        assert!(srb_histogram(&sys, field, &class, &cloud, 100, 64).is_err());
        let h = srb_histogram(&sys, field, &class, &cloud, 5000, 64).unwrap();
        assert!((h.counts.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((h.theta_marginal.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(h.sink_masses, vec![1.0]);
        let fit = &h.sink_fits[0];
        // center band from the peak width, plus a tighter engineering band
        let band = 3.0 * eps.sqrt() * field.sigma2.eval(0.5).sqrt();
        assert!(dist(fit.center, 0.5) < band);
        assert!(dist(fit.center, 0.5) < 0.02, "center {}", fit.center);
        // the quartic softening of the well widens the exact stationary
        // in-window variance to 1.102x the linearized value at this epsilon
        let ratio = fit.variance / fit.predicted_variance;
        assert!((ratio - 1.102).abs() < 0.09, "variance ratio {ratio}");
        assert!(ratio > 0.8 && ratio < 1.2, "variance ratio {ratio}");
        assert!(h.outside_mass < 0.1, "outside mass {}", h.outside_mass);
    }

    #[test]
    fn stationary_histogram_survives_extra_steps() {
        let eps = 5e-3;
        let sys = one_sink_sys(eps);
        let field = one_sink_field();
        let class = classify_zeros(field, 1e-6).unwrap();
        let cloud = Cloud::lebesgue(2048, 29);
        let h1 = srb_histogram(&sys, field, &class, &cloud, 1060, 64).unwrap();
        // same dither stream, so the longer walk extends the shorter one
        let h2 = srb_histogram(&sys, field, &class, &cloud, 1060 + 200, 64).unwrap();
        let l1 = h1.l1_theta(&h2).unwrap();
        let thr = 3.0 * (h1.l1_sigma * h1.l1_sigma + h2.l1_sigma * h2.l1_sigma).sqrt();
        assert!(l1 <= thr, "L1 {l1} vs threshold {thr}");
        assert!(srb_seed_note(&h1, &h2).unwrap().is_none());
    }

    #[test]
    fn wasserstein_handles_the_three_reference_cases() {
        let mut rng = stream_rng(31, "w1-test", 0);
        let pts: Vec<(f64, f64, f64)> =
            (0..512).map(|_| (rng.gen(), 0.3 + 0.05 * rng.gen::<f64>(), 1.0)).collect();
        let a = Cloud { pts: pts.clone(), seed: 0, step: 0 };
        assert!(wasserstein_vertical(&a, &a, WASSERSTEIN_X_BINS).unwrap() < 1e-12);

        // same x values, theta rigidly shifted
        let shifted = Cloud {
            pts: pts.iter().map(|&(x, t, w)| (x, wrap(t + 0.17), w)).collect(),
            seed: 0,
            step: 0,
        };
        let d = wasserstein_vertical(&a, &shifted, WASSERSTEIN_X_BINS).unwrap();
        assert!((d - 0.17).abs() < 1e-9, "shift distance {d}");

        let left = Cloud {
            pts: (0..256).map(|i| (0.3 * i as f64 / 256.0, 0.5, 1.0)).collect(),
            seed: 0,
            step: 0,
        };
        let right = Cloud {
            pts: (0..256).map(|i| (0.6 + 0.3 * i as f64 / 256.0, 0.5, 1.0)).collect(),
            seed: 0,
            step: 0,
        };
        let d = wasserstein_vertical(&left, &right, WASSERSTEIN_X_BINS).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "disjoint distance {d}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn wasserstein_is_a_metric_up_to_binning(sa in 0u64..1000, sb in 0u64..1000, sc in 0u64..1000) {
            let bins = 16usize;
            let cloud = |s: u64| {
                let mut rng = stream_rng(s, "w1-prop", 0);
                let pts = (0..32)
                    .map(|_| {
                        let x: f64 = rand::Rng::gen(&mut rng);
                        let t: f64 = rand::Rng::gen(&mut rng);
                        (x, t, 1.0)
                    })
                    .collect();
                Cloud { pts, seed: s, step: 0 }
            };
            let (a, b, c) = (cloud(sa), cloud(sb), cloud(sc));
            let dab = wasserstein_vertical(&a, &b, bins).unwrap();
            let dba = wasserstein_vertical(&b, &a, bins).unwrap();
            prop_assert_eq!(dab, dba);
            prop_assert!(wasserstein_vertical(&a, &a, bins).unwrap() < 1e-12);
            let dac = wasserstein_vertical(&a, &c, bins).unwrap();
            let dbc = wasserstein_vertical(&b, &c, bins).unwrap();
            prop_assert!(dac <= dab + dbc + 2.0 / bins as f64 + 1e-9);
        }
    }
}
