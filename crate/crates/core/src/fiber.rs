//! Per-theta fast dynamics: the fiber map x -> f(x, theta), its Ulam transfer
//! operator, invariant density, drive averages, Green-Kubo variance, and
//! periodic-orbit enumeration.
//!
//! The Ulam matrix is built from the monotone lift: each source cell's image
//! interval is cut at every grid line by an inverse solve, so column sums
//! telescope to exactly 1 on power-of-two grids. On those grids the doubling
//! map's operator coincides with the exact transfer operator restricted to
//! piecewise constants, which is what makes the closed-form variance oracles
//! reproducible to ~1e-7 instead of ~1/N.

use crate::system::System;

/// A fixed-theta fiber of a system.
#[derive(Clone, Copy)]
pub struct Fiber<'a> {
    pub system: &'a System,
    pub theta: f64,
}

impl<'a> Fiber<'a> {
    pub fn new(system: &'a System, theta: f64) -> Self {
        Fiber { system, theta }
    }

    /// The increasing lift h with h(x+1) = h(x) + degree.
    #[inline]
    pub fn lift(&self, x: f64) -> f64 {
        self.system.f_lift(x, self.theta)
    }

    #[inline]
    pub fn dlift(&self, x: f64) -> f64 {
        self.system.dx_f(x, self.theta)
    }

    /// The drive along this fiber.
    #[inline]
    pub fn omega(&self, x: f64) -> f64 {
        self.system.omega(x, self.theta)
    }

    /// Solve lift(x) = y on the bracket [lo, hi] (requires the root inside).
    /// Newton with bisection safeguarding, run to f64 stagnation; the lift's
    /// slope is >= lambda >= 2, so this is uniformly well conditioned.
    pub fn inv_lift(&self, y: f64, mut lo: f64, mut hi: f64) -> f64 {
        debug_assert!(self.lift(lo) <= y + 1e-9 && self.lift(hi) >= y - 1e-9);
        let mut x = 0.5 * (lo + hi);
        for _ in 0..80 {
            let r = self.lift(x) - y;
            if r == 0.0 {
                return x;
            }
            if r > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let step = r / self.dlift(x);
            let mut next = x - step;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= 2.0 * f64::EPSILON * x.abs().max(0.5) {
                return next;
            }
            x = next;
        }
        x
    }

    /// Inverse branch a: the unique x in [0,1] with lift(x) = y + a - lift-offset,
    /// i.e. the preimage of y through branch a in [0, 1).
    pub fn inv_branch(&self, a: u32, y: f64) -> f64 {
        let base = self.lift(0.0);
        self.inv_lift(base + crate::circle::wrap(y - base) + f64::from(a), 0.0, 1.0)
    }
}

/// Column-stochastic Ulam discretization of the fiber transfer operator.
pub struct UlamOperator {
    pub n: usize,
    /// cols[j] = list of (target cell, weight); weights of a column sum to 1.
    cols: Vec<Vec<(u32, f64)>>,
}

impl UlamOperator {
    /// n must be a power of two >= 256 (keeps cell boundaries dyadic, so the
    /// doubling fibers are represented exactly).
    pub fn build(fiber: &Fiber, n: usize) -> Result<UlamOperator, String> {
        if n < 256 || !n.is_power_of_two() {
            return Err(format!("Ulam grid must be a power of two >= 256, got {n}"));
        }
        let nf = n as f64;
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let a = j as f64 / nf;
            let b = (j + 1) as f64 / nf;
            let ya = fiber.lift(a);
            let yb = fiber.lift(b);
            let k_first = (ya * nf).floor() as i64 + 1;
            let k_last = (yb * nf).ceil() as i64 - 1;
            let mut col: Vec<(u32, f64)> = Vec::with_capacity((k_last - k_first + 2) as usize);
            let mut x_prev = a;
            let mut cell_prev = k_first - 1;
            for k in k_first..=k_last {
                let x_cut = fiber.inv_lift(k as f64 / nf, x_prev, b);
                push_weight(&mut col, cell_prev, (x_cut - x_prev) * nf, n);
                x_prev = x_cut;
                cell_prev = k;
            }
            push_weight(&mut col, cell_prev, (b - x_prev) * nf, n);
            cols.push(col);
        }
        Ok(UlamOperator { n, cols })
    }

    /// Push a density (cell averages) forward one step.
    pub fn apply(&self, src: &[f64], dst: &mut [f64]) {
        dst.iter_mut().for_each(|v| *v = 0.0);
        for (j, col) in self.cols.iter().enumerate() {
            let m = src[j];
            if m != 0.0 {
                for &(i, w) in col {
                    dst[i as usize] += w * m;
                }
            }
        }
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.cols.iter().map(|c| c.iter().map(|&(_, w)| w).sum()).collect()
    }

    /// Power-iterate from the uniform density until ||U rho - rho||_1 <= 1e-10
    /// (L1 taken with the same 1/n normalization as the density itself).
    pub fn invariant_density(&self) -> Result<DensityGrid, String> {
        let n = self.n;
        let mut rho = vec![1.0; n];
        let mut next = vec![0.0; n];
        for _ in 0..10_000 {
            self.apply(&rho, &mut next);
            let mut diff = 0.0;
            for i in 0..n {
                diff += (next[i] - rho[i]).abs();
            }
            diff /= n as f64;
            std::mem::swap(&mut rho, &mut next);
            if diff <= 1e-10 {
                let mut grid = DensityGrid { n, values: rho };
                grid.renormalize();
                grid.validate()?;
                return Ok(grid);
            }
        }
        Err("invariant density did not converge within 10000 iterations".into())
    }
}

#[inline]
fn push_weight(col: &mut Vec<(u32, f64)>, cell: i64, w: f64, n: usize) {
    if w > 0.0 {
        col.push((cell.rem_euclid(n as i64) as u32, w));
    }
}

/// A probability density as cell averages on the uniform n-grid: values >= 0
/// and (1/n) sum = 1. Quadrature pairs cell averages with midpoint samples.
#[derive(Clone, Debug)]
pub struct DensityGrid {
    pub n: usize,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn uniform(n: usize) -> Self {
        DensityGrid { n, values: vec![1.0; n] }
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.n as f64
    }

    fn renormalize(&mut self) {
        let mean = self.values.iter().sum::<f64>() / self.n as f64;
        self.values.iter_mut().for_each(|v| *v /= mean);
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.values.iter().any(|v| !(*v >= 0.0)) {
            return Err("density has a negative cell".into());
        }
        let mean = self.values.iter().sum::<f64>() / self.n as f64;
        if (mean - 1.0).abs() > 1e-9 {
            return Err(format!("density mean {mean} != 1"));
        }
        Ok(())
    }

    /// integral of g against the density (midpoint quadrature).
    pub fn integrate(&self, g: impl Fn(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            acc += self.values[i] * g(self.midpoint(i));
        }
        acc / self.n as f64
    }

    /// L1 distance to another density of the same or coarser resolution.
    pub fn l1_distance(&self, other: &DensityGrid) -> f64 {
        assert!(self.n % other.n == 0, "grids must nest");
        let k = self.n / other.n;
        let mut acc = 0.0;
        for j in 0..other.n {
            for r in 0..k {
                acc += (self.values[j * k + r] - other.values[j]).abs();
            }
        }
        acc / self.n as f64
    }
}

/// averaged drive omega_bar(theta) = int omega(x, theta) rho_theta(dx).
pub fn averaged_drift(fiber: &Fiber, rho: &DensityGrid) -> f64 {
    rho.integrate(|x| fiber.omega(x))
}

/// Green-Kubo output: the variance, the terms actually summed, and the
/// truncation certificate (magnitude of the last term examined).
#[derive(Clone, Debug, serde::Serialize)]
pub struct GreenKubo {
    pub sigma2: f64,
    pub terms_used: usize,
    pub last_term: f64,
    /// false when the autocovariance tail refuses to decay geometrically, which
    /// is the classic symptom of the drive being cohomologous to a constant.
    pub geometric: bool,
}

/// sigma_bar^2(theta) = int magnitude of the centered drive plus twice its
/// forward autocovariances, summed until |term| < 1e-12 or m == m_max.
pub fn green_kubo(fiber: &Fiber, ulam: &UlamOperator, rho: &DensityGrid, m_max: usize) -> GreenKubo {
    let n = rho.n;
    let omega_bar = averaged_drift(fiber, rho);
    let hat = |x: f64| fiber.omega(x) - omega_bar;
    let mut v: Vec<f64> = (0..n).map(|i| hat(rho.midpoint(i)) * rho.values[i]).collect();
    let mut next = vec![0.0; n];
    let mut sigma2 = {
        let mut acc = 0.0;
        for i in 0..n {
            acc += hat(rho.midpoint(i)) * v[i];
        }
        acc / n as f64
    };
    let mut prev_mag = f64::INFINITY;
    let mut growth_strikes = 0usize;
    let mut terms_used = 0;
    let mut last_term = sigma2;
    for m in 1..=m_max {
        ulam.apply(&v, &mut next);
        std::mem::swap(&mut v, &mut next);
        let mut c = 0.0;
        for i in 0..n {
            c += hat(rho.midpoint(i)) * v[i];
        }
        c /= n as f64;
        sigma2 += 2.0 * c;
        terms_used = m;
        last_term = c;
        let mag = c.abs();
        if mag >= prev_mag && mag > 1e-10 {
            growth_strikes += 1;
        }
        prev_mag = mag;
        if mag < 1e-12 {
            break;
        }
    }
    GreenKubo { sigma2, terms_used, last_term, geometric: growth_strikes < 3 }
}

/// A periodic orbit of the fiber map with its drive average.
#[derive(Clone, Debug, serde::Serialize)]
pub struct Orbit {
    pub period: usize,
    pub points: Vec<f64>,
    pub omega_avg: f64,
}

/// Enumerate all periodic orbits of minimal period <= p_max via their symbolic
/// itineraries (one representative per necklace), refined by the contracting
/// inverse-branch sweep. Degree^p_max is capped to keep enumeration sane.
pub fn periodic_orbits(fiber: &Fiber, p_max: usize) -> Result<Vec<Orbit>, String> {
    if p_max == 0 || p_max > 16 {
        return Err(format!("period cap must be in 1..=16, got {p_max}"));
    }
    let d = fiber.system.degree as u64;
    if (d as f64).powi(p_max as i32) > 2.2e7 {
        return Err(format!("degree {d} at period cap {p_max} exceeds the enumeration budget"));
    }
    let mut orbits = Vec::new();
    let mut itin = Vec::new();
    for p in 1..=p_max {
        let total = d.pow(p as u32);
        'codes: for code in 0..total {
            // digits of the itinerary, most-significant first
            itin.clear();
            let mut c = code;
            for _ in 0..p {
                itin.push((c % d) as u32);
                c /= d;
            }
            itin.reverse();
            // keep only strictly minimal rotations (Lyndon-class representative
            // with exact period p)
            for r in 1..p {
                let cmp = compare_rotation(&itin, r);
                if cmp != std::cmp::Ordering::Less {
                    continue 'codes;
                }
            }
            if let Some(orbit) = refine_orbit(fiber, &itin) {
                orbits.push(orbit);
            }
        }
    }
    // The two constant itineraries of period 1 both converge to the seam point
    // when lift(0) is an integer (x = 1 is x = 0); drop the duplicate.
    orbits.sort_by(|a, b| {
        (a.period, min_point(a)).partial_cmp(&(b.period, min_point(b))).unwrap()
    });
    orbits.dedup_by(|a, b| {
        a.period == b.period && crate::circle::dist(min_point(a), min_point(b)) < 1e-9
    });
    Ok(orbits)
}

fn min_point(o: &Orbit) -> f64 {
    o.points.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Ordering of the itinerary vs its rotation by r (Less means original is
/// strictly smaller, i.e. still the canonical representative).
fn compare_rotation(itin: &[u32], r: usize) -> std::cmp::Ordering {
    let p = itin.len();
    for k in 0..p {
        let ord = itin[k].cmp(&itin[(k + r) % p]);
        if ord != std::cmp::Ordering::Equal {
            return ord;
        }
    }
    std::cmp::Ordering::Equal
}

/// Contract the inverse-branch composition to its fixed point. Each sweep
/// shrinks the error by lambda^{-p}; failure to settle reports None (the spec
/// wants failed seeds skipped but counted by the caller via the total).
fn refine_orbit(fiber: &Fiber, itin: &[u32]) -> Option<Orbit> {
    let p = itin.len();
    let mut x = 0.5;
    let mut last = f64::INFINITY;
    for _ in 0..64 {
        let mut z = x;
        for &a in itin.iter().rev() {
            z = fiber.inv_branch(a, z);
        }
        let moved = (z - x).abs();
        x = z;
        if moved < 1e-15 {
            last = moved;
            break;
        }
        last = moved;
    }
    if last > 1e-12 {
        return None;
    }
    // reconstruct the forward orbit and its average
    let mut points = Vec::with_capacity(p);
    let mut avg = 0.0;
    let mut z = crate::circle::wrap(x);
    for _ in 0..p {
        points.push(z);
        avg += fiber.omega(z);
        z = crate::circle::wrap(fiber.lift(z));
    }
    Some(Orbit { period: p, points, omega_avg: avg / p as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{BarShape, Family, HatShape, System};

    fn doubling_unit() -> System {
        System::new(
            Family::SkewDoubling { bar: BarShape::SinFourPi, hat: HatShape::Cos { amp: 1.0 } },
            0.01,
        )
        .unwrap()
    }

    #[test]
    fn ulam_columns_are_stochastic() {
        let sys = System::new(Family::nonexample(5, 0.05, 0.02), 1e-3).unwrap();
        let fiber = Fiber::new(&sys, 0.13);
        let ulam = UlamOperator::build(&fiber, 512).unwrap();
        for s in ulam.column_sums() {
            assert!((s - 1.0).abs() < 1e-12, "column sum {s}");
        }
    }

    #[test]
    fn doubling_density_is_exactly_uniform() {
        let sys = doubling_unit();
        let fiber = Fiber::new(&sys, 0.37);
        for n in [256usize, 1024, 4096] {
            let ulam = UlamOperator::build(&fiber, n).unwrap();
            let rho = ulam.invariant_density().unwrap();
            for v in &rho.values {
                assert_eq!(*v, 1.0);
            }
        }
    }

    #[test]
    fn affine_density_is_uniform_to_1e8() {
        let sys = System::new(Family::affine(5, 0.1, 3.0), 0.01).unwrap();
        let fiber = Fiber::new(&sys, 0.42);
        let ulam = UlamOperator::build(&fiber, 1024).unwrap();
        let rho = ulam.invariant_density().unwrap();
        for v in &rho.values {
            assert!((v - 1.0).abs() < 1e-8, "cell value {v}");
        }
    }

    #[test]
    fn nonexample_density_stable_under_refinement() {
        let sys = System::new(Family::nonexample(5, 0.05, 0.02), 1e-3).unwrap();
        let fiber = Fiber::new(&sys, 0.13);
        let coarse = UlamOperator::build(&fiber, 1 << 12).unwrap().invariant_density().unwrap();
        let fine = UlamOperator::build(&fiber, 1 << 13).unwrap().invariant_density().unwrap();
        assert!(fine.l1_distance(&coarse) <= 1e-3);
    }

    #[test]
    fn green_kubo_oracles_over_doubling() {
        // cos(2 pi x): all forward autocovariances vanish, sigma^2 = 1/2.
        let sys = doubling_unit();
        let fiber = Fiber::new(&sys, 0.0);
        let ulam = UlamOperator::build(&fiber, 4096).unwrap();
        let rho = ulam.invariant_density().unwrap();
        let gk = green_kubo(&fiber, &ulam, &rho, 40);
        assert!((gk.sigma2 - 0.5).abs() < 1e-6, "sigma2 = {}", gk.sigma2);
        assert!(gk.geometric);
        assert!(gk.last_term.abs() < 1e-12);

        // cos(2 pi x) + cos(4 pi x): one surviving cross term, sigma^2 = 2.
        let sys2 = System::new(
            Family::SkewDoubling { bar: BarShape::SinFourPi, hat: HatShape::CosPair },
            0.01,
        )
        .unwrap();
        let fiber2 = Fiber::new(&sys2, 0.0);
        let gk2 = green_kubo(&fiber2, &ulam, &rho, 40);
        assert!((gk2.sigma2 - 2.0).abs() < 1e-6, "sigma2 = {}", gk2.sigma2);
    }

    #[test]
    fn orbit_counts_match_doubling_census() {
        let sys = doubling_unit();
        let fiber = Fiber::new(&sys, 0.2);
        let orbits = periodic_orbits(&fiber, 6).unwrap();
        // fixed points of f^p number 2^p - 1; orbits of minimal period p
        // partition them
        for p in 1..=6usize {
            let fixed: usize = orbits
                .iter()
                .filter(|o| p % o.period == 0)
                .map(|o| o.period)
                .sum();
            assert_eq!(fixed, (1usize << p) - 1, "fixed-point count at p = {p}");
        }
    }

    #[test]
    fn orbit_averages_match_known_points() {
        // drive cos(2 pi x) over doubling: fixed point 0 averages omega_bar + 1,
        // the 2-cycle {1/3, 2/3} averages omega_bar - 1/2
        let sys = doubling_unit();
        let theta = 0.15;
        let fiber = Fiber::new(&sys, theta);
        let bar = BarShape::SinFourPi.value(theta);
        let orbits = periodic_orbits(&fiber, 2).unwrap();
        let fp = orbits.iter().find(|o| o.period == 1 && o.points[0] < 1e-9).unwrap();
        assert!((fp.omega_avg - (bar + 1.0)).abs() < 1e-12);
        let two = orbits.iter().find(|o| o.period == 2).unwrap();
        assert!((two.omega_avg - (bar - 0.5)).abs() < 1e-9);
        // peak drive at the fixed point: one-sink family reaches omega_bar + 3
        let sys3 = System::new(Family::one_sink(), 1e-3).unwrap();
        let fiber3 = Fiber::new(&sys3, theta);
        let orbits3 = periodic_orbits(&fiber3, 1).unwrap();
        let fp3 = orbits3.iter().find(|o| o.points[0] < 1e-9).unwrap();
        assert!((fp3.omega_avg - (BarShape::SinOverTwoPi.value(theta) + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn orbit_averages_bounded_by_drive_range() {
        let sys = System::new(Family::nonexample(5, 0.05, 0.02), 1e-3).unwrap();
        let fiber = Fiber::new(&sys, 0.31);
        let orbits = periodic_orbits(&fiber, 5).unwrap();
        assert!(!orbits.is_empty());
        for o in &orbits {
            assert!(o.omega_avg <= 1.0 + 1e-12 && o.omega_avg >= -1.0 - 1e-12);
        }
    }

    #[test]
    fn birkhoff_average_agrees_with_ulam_drift() {
        // long dithered orbit of the doubling fiber vs the quadrature answer;
        // 3 standard errors of the sample mean as the oracle band
        let sys = System::new(Family::one_sink(), 1e-3).unwrap();
        let theta = 0.4;
        let fiber = Fiber::new(&sys, theta);
        let ulam = UlamOperator::build(&fiber, 4096).unwrap();
        let rho = ulam.invariant_density().unwrap();
        let quad = averaged_drift(&fiber, &rho);

        let steps = 10_000_000usize;
        let mut x = 0.123456789f64;
        let mut acc = crate::circle::Kahan::default();
        let mut word = 0u64;
        for k in 0..steps {
            acc.add(fiber.omega(x));
            if k % 64 == 0 {
                word = crate::rng::dither_word(9, 0, (k / 64) as u64);
            }
            let bit = (word >> (k % 64)) & 1;
            x = crate::circle::wrap(2.0 * x) + bit as f64 * f64::EPSILON * 0.5;
            if x >= 1.0 {
                x -= 1.0;
            }
        }
        let mean = acc.value() / steps as f64;
        // var of 3cos is 4.5, and consecutive terms decorrelate after one step
        let se = (4.5f64 / steps as f64).sqrt();
        assert!(
            (mean - quad).abs() < 3.0 * se,
            "birkhoff {mean} vs quadrature {quad} (se {se:e})"
        );
    }
}
