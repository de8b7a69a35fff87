//! Map families F_eps(x, theta) = (f(x, theta), theta + eps*omega(x, theta)) on the
//! two-torus, with exact analytic partials and construction-time validity checks.
//!
//! All families keep the fast coordinate expanding: d_x f >= lambda, with lambda = 2
//! for the skew products over the doubling map and lambda > 2 for the degree-5
//! families (where theta-dependence of the fiber makes the stronger bound matter).

use crate::circle::wrap;
use crate::trig::{cos2pi, sin2pi};
use serde::Serialize;

/// A point on T^2 = (R/Z)^2, stored in [0,1) x [0,1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TorusPoint {
    pub x: f64,
    pub theta: f64,
}

impl TorusPoint {
    pub fn new(x: f64, theta: f64) -> Self {
        TorusPoint { x: wrap(x), theta: wrap(theta) }
    }

    /// Max over coordinates of the minimal-image circle distances.
    pub fn dist(&self, other: &TorusPoint) -> f64 {
        crate::circle::dist(self.x, other.x).max(crate::circle::dist(self.theta, other.theta))
    }
}

/// mean(cos^64(pi x)) = C(64,32)/2^64; the plateau drive subtracts it to center.
const PLATEAU_MEAN: f64 = 0.09934675374796689;
/// Amplitude making the plateau drive hit exactly 3 at x = 0.
const PLATEAU_AMP: f64 = 3.3309156575898236;

/// Slow-field shapes omega_bar(theta) available to the skew families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum BarShape {
    /// sin(2 pi theta)/(2 pi): one source at 0, one sink at 1/2 with slope -1.
    SinOverTwoPi,
    /// sin(4 pi theta): sources at 0, 1/2 and sinks at 1/4, 3/4 with slope -4 pi.
    SinFourPi,
}

impl BarShape {
    pub fn value(self, theta: f64) -> f64 {
        match self {
            BarShape::SinOverTwoPi => sin2pi(theta) / (2.0 * std::f64::consts::PI),
            BarShape::SinFourPi => sin2pi(2.0 * theta),
        }
    }

    pub fn deriv(self, theta: f64) -> f64 {
        match self {
            BarShape::SinOverTwoPi => cos2pi(theta),
            BarShape::SinFourPi => 4.0 * std::f64::consts::PI * cos2pi(2.0 * theta),
        }
    }

    pub fn sup(self) -> f64 {
        match self {
            BarShape::SinOverTwoPi => 1.0 / (2.0 * std::f64::consts::PI),
            BarShape::SinFourPi => 1.0,
        }
    }

    pub fn sup_deriv(self) -> f64 {
        match self {
            BarShape::SinOverTwoPi => 1.0,
            BarShape::SinFourPi => 4.0 * std::f64::consts::PI,
        }
    }
}

/// Fast-drive shapes omega_hat(x), all with zero Lebesgue mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum HatShape {
    /// amp * cos(2 pi x).
    Cos { amp: f64 },
    /// cos(2 pi x) + cos(4 pi x); its Green-Kubo variance over doubling is exactly 2.
    CosPair,
    /// A (cos^64(pi x) - m): range (-0.3310, 3], peak 3 at x = 0, broad negative shelf.
    Plateau,
}

impl HatShape {
    pub fn value(self, x: f64) -> f64 {
        match self {
            HatShape::Cos { amp } => amp * cos2pi(x),
            HatShape::CosPair => cos2pi(x) + cos2pi(2.0 * x),
            HatShape::Plateau => {
                let c = cos2pi(0.5 * x);
                PLATEAU_AMP * (c.powi(64) - PLATEAU_MEAN)
            }
        }
    }

    pub fn deriv(self, x: f64) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        match self {
            HatShape::Cos { amp } => -two_pi * amp * sin2pi(x),
            HatShape::CosPair => -two_pi * (sin2pi(x) + 2.0 * sin2pi(2.0 * x)),
            HatShape::Plateau => {
                let c = cos2pi(0.5 * x);
                let s = sin2pi(0.5 * x);
                -64.0 * std::f64::consts::PI * PLATEAU_AMP * c.powi(63) * s
            }
        }
    }

    pub fn sup(self) -> f64 {
        match self {
            HatShape::Cos { amp } => amp.abs(),
            HatShape::CosPair => 2.0,
            HatShape::Plateau => 3.0,
        }
    }

    pub fn sup_deriv(self) -> f64 {
        match self {
            HatShape::Cos { amp } => 2.0 * std::f64::consts::PI * amp.abs(),
            HatShape::CosPair => sup_on_grid(|x| self.deriv(x).abs(), 1 << 16),
            HatShape::Plateau => sup_on_grid(|x| self.deriv(x).abs(), 1 << 16),
        }
    }
}

/// The map families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Family {
    /// F(x,theta) = (2x, theta + eps(bar(theta) + hat(x))); fiber independent of theta.
    SkewDoubling { bar: BarShape, hat: HatShape },
    /// F(x,theta) = (l x + a theta, theta + eps(b cos(2 pi x) - cos(2 pi theta)/(2 pi))).
    /// With a not an integer this is discontinuous in theta as a torus map; every
    /// quantity computed here lives on fixed-theta fibers, where it is smooth.
    AffineNonskew { l: u32, a: f64, b: f64 },
    /// F(x,theta) = (l x + sin(2 pi theta)(alpha sin(2 pi x) + beta sin(2 pi l x)),
    ///               theta + eps cos(2 pi x)).
    /// The center direction is mostly expanding for alpha > 0: the usual sink-slope
    /// normalization fails, which is exactly what it demonstrates.
    Nonexample { l: u32, alpha: f64, beta: f64 },
}

impl Family {
    /// One sink at theta = 1/2 (slope exactly -1), drive peak omega_hat(0) = 3.
    pub fn one_sink() -> Family {
        Family::SkewDoubling { bar: BarShape::SinOverTwoPi, hat: HatShape::Cos { amp: 3.0 } }
    }

    /// Two sinks, |omega_hat| <= 1/2: the saddle arcs block all slow paths, so the
    /// two traps never communicate.
    pub fn two_sink_nonergodic() -> Family {
        Family::SkewDoubling { bar: BarShape::SinFourPi, hat: HatShape::Cos { amp: 0.5 } }
    }

    /// Two sinks with the plateau drive reaching 3: upward slow motion is admissible
    /// everywhere, so the system is ergodic but metastable.
    pub fn two_sink_ergodic() -> Family {
        Family::SkewDoubling { bar: BarShape::SinFourPi, hat: HatShape::Plateau }
    }

    pub fn affine(l: u32, a: f64, b: f64) -> Family {
        Family::AffineNonskew { l, a, b }
    }

    pub fn nonexample(l: u32, alpha: f64, beta: f64) -> Family {
        Family::Nonexample { l, alpha, beta }
    }

    /// Topological degree of the fiber maps (constant in theta).
    pub fn degree(&self) -> u32 {
        match *self {
            Family::SkewDoubling { .. } => 2,
            Family::AffineNonskew { l, .. } | Family::Nonexample { l, .. } => l,
        }
    }

    /// Certified lower bound on d_x f over the whole torus.
    pub fn lambda(&self) -> f64 {
        match *self {
            Family::SkewDoubling { .. } => 2.0,
            Family::AffineNonskew { l, .. } => f64::from(l),
            Family::Nonexample { l, alpha, beta } => {
                f64::from(l)
                    - 2.0 * std::f64::consts::PI * (alpha.abs() + f64::from(l) * beta.abs())
            }
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            Family::SkewDoubling { hat, .. } => {
                if let HatShape::Cos { amp } = hat {
                    if !amp.is_finite() {
                        return Err("cosine drive amplitude must be finite".into());
                    }
                }
                Ok(())
            }
            Family::AffineNonskew { l, a, b } => {
                if l < 3 {
                    return Err(format!("affine family needs degree >= 3, got {l}"));
                }
                if !a.is_finite() || !b.is_finite() {
                    return Err("affine parameters must be finite".into());
                }
                Ok(())
            }
            Family::Nonexample { l, alpha, beta } => {
                let lam = Family::Nonexample { l, alpha, beta }.lambda();
                if lam <= 2.0 {
                    return Err(format!(
                        "nonexample expansion bound l - 2 pi (alpha + l beta) = {lam:.4} <= 2"
                    ));
                }
                Ok(())
            }
        }
    }
}

fn sup_on_grid(f: impl Fn(f64) -> f64, n: usize) -> f64 {
    let mut m = 0.0f64;
    for i in 0..n {
        m = m.max(f(i as f64 / n as f64));
    }
    m
}

/// A validated system: family, eps, and the cached norms the cone and pair
/// machinery keeps asking for.
#[derive(Clone, Debug, Serialize)]
pub struct System {
    pub family: Family,
    pub epsilon: f64,
    pub lambda: f64,
    pub degree: u32,
    pub sup_omega: f64,
    pub sup_dx_omega: f64,
    pub sup_dtheta_f: f64,
    pub sup_dtheta_omega: f64,
}

impl System {
    pub fn new(family: Family, epsilon: f64) -> Result<System, String> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(format!("epsilon must be finite and >= 0, got {epsilon}"));
        }
        family.validate()?;
        let (sup_omega, sup_dx_omega, sup_dtheta_f, sup_dtheta_omega) = match family {
            Family::SkewDoubling { bar, hat } => {
                (bar.sup() + hat.sup(), hat.sup_deriv(), 0.0, bar.sup_deriv())
            }
            Family::AffineNonskew { a, b, .. } => (
                b.abs() + 1.0 / (2.0 * std::f64::consts::PI),
                2.0 * std::f64::consts::PI * b.abs(),
                a.abs(),
                1.0,
            ),
            Family::Nonexample { alpha, beta, l } => {
                let pert =
                    sup_on_grid(|x| (alpha * sin2pi(x) + beta * sin2pi(f64::from(l) * x)).abs(), 1 << 16);
                (1.0, 2.0 * std::f64::consts::PI, 2.0 * std::f64::consts::PI * pert, 0.0)
            }
        };
        let sys = System {
            family,
            epsilon,
            lambda: family.lambda(),
            degree: family.degree(),
            sup_omega,
            sup_dx_omega,
            sup_dtheta_f,
            sup_dtheta_omega,
        };
        // Expansion must clear 2 strictly whenever the fiber depends on theta;
        // the skew products sit exactly at 2 with d_theta f == 0, where nothing
        // downstream consumes the slack.
        if sys.sup_dtheta_f > 0.0 && sys.lambda <= 2.0 {
            return Err(format!("expansion lower bound {} <= 2 with theta-dependent fiber", sys.lambda));
        }
        sys.spot_check_expansion()?;
        Ok(sys)
    }

    /// Same family at a different eps (sweeps).
    pub fn with_epsilon(&self, epsilon: f64) -> System {
        System::new(self.family, epsilon).expect("family already validated")
    }

    fn spot_check_expansion(&self) -> Result<(), String> {
        let n = 1 << 7;
        for i in 0..n {
            for j in 0..n {
                let x = i as f64 / n as f64;
                let theta = j as f64 / n as f64;
                let d = self.dx_f(x, theta);
                if d < self.lambda - 1e-12 {
                    return Err(format!(
                        "d_x f = {d} at ({x}, {theta}) undercuts certified lambda = {}",
                        self.lambda
                    ));
                }
            }
        }
        Ok(())
    }

    /// Lift of the fiber map: strictly increasing on R with f(x+1) = f(x) + degree.
    #[inline]
    pub fn f_lift(&self, x: f64, theta: f64) -> f64 {
        match self.family {
            Family::SkewDoubling { .. } => 2.0 * x,
            Family::AffineNonskew { l, a, .. } => f64::from(l) * x + a * theta,
            Family::Nonexample { l, alpha, beta } => {
                f64::from(l) * x
                    + sin2pi(theta) * (alpha * sin2pi(x) + beta * sin2pi(f64::from(l) * x))
            }
        }
    }

    #[inline]
    pub fn dx_f(&self, x: f64, theta: f64) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        match self.family {
            Family::SkewDoubling { .. } => 2.0,
            Family::AffineNonskew { l, .. } => f64::from(l),
            Family::Nonexample { l, alpha, beta } => {
                f64::from(l)
                    + sin2pi(theta)
                        * two_pi
                        * (alpha * cos2pi(x) + f64::from(l) * beta * cos2pi(f64::from(l) * x))
            }
        }
    }

    #[inline]
    pub fn dtheta_f(&self, x: f64, theta: f64) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        match self.family {
            Family::SkewDoubling { .. } => 0.0,
            Family::AffineNonskew { a, .. } => a,
            Family::Nonexample { l, alpha, beta } => {
                two_pi * cos2pi(theta) * (alpha * sin2pi(x) + beta * sin2pi(f64::from(l) * x))
            }
        }
    }

    #[inline]
    pub fn omega(&self, x: f64, theta: f64) -> f64 {
        match self.family {
            Family::SkewDoubling { bar, hat } => bar.value(theta) + hat.value(x),
            Family::AffineNonskew { b, .. } => {
                b * cos2pi(x) - cos2pi(theta) / (2.0 * std::f64::consts::PI)
            }
            Family::Nonexample { .. } => cos2pi(x),
        }
    }

    #[inline]
    pub fn dx_omega(&self, x: f64, _theta: f64) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        match self.family {
            Family::SkewDoubling { hat, .. } => hat.deriv(x),
            Family::AffineNonskew { b, .. } => -two_pi * b * sin2pi(x),
            Family::Nonexample { .. } => -two_pi * sin2pi(x),
        }
    }

    #[inline]
    pub fn dtheta_omega(&self, _x: f64, theta: f64) -> f64 {
        match self.family {
            Family::SkewDoubling { bar, .. } => bar.deriv(theta),
            Family::AffineNonskew { .. } => sin2pi(theta),
            Family::Nonexample { .. } => 0.0,
        }
    }

    /// One application of F_eps.
    #[inline]
    pub fn apply(&self, p: TorusPoint) -> TorusPoint {
        TorusPoint {
            x: wrap(self.f_lift(p.x, p.theta)),
            theta: wrap(p.theta + self.epsilon * self.omega(p.x, p.theta)),
        }
    }

    /// n-fold composition.
    pub fn apply_n(&self, mut p: TorusPoint, n: usize) -> TorusPoint {
        for _ in 0..n {
            p = self.apply(p);
        }
        p
    }

    /// Jacobian rows [[d_x f, d_theta f], [eps d_x omega, 1 + eps d_theta omega]].
    pub fn jacobian(&self, p: TorusPoint) -> [[f64; 2]; 2] {
        [
            [self.dx_f(p.x, p.theta), self.dtheta_f(p.x, p.theta)],
            [
                self.epsilon * self.dx_omega(p.x, p.theta),
                1.0 + self.epsilon * self.dtheta_omega(p.x, p.theta),
            ],
        ]
    }

    /// True when the fiber map is exactly binary shifting in f64 (the doubling
    /// skew), in which case long orbits drain mantissa entropy and ensembles
    /// replenish the low bit from their RNG stream.
    pub fn fiber_is_exact_doubling(&self) -> bool {
        matches!(self.family, Family::SkewDoubling { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn skew_plain() -> System {
        // full-amplitude cosine drive over sin(4 pi theta)
        System::new(
            Family::SkewDoubling { bar: BarShape::SinFourPi, hat: HatShape::Cos { amp: 1.0 } },
            0.01,
        )
        .unwrap()
    }

    #[test]
    fn skew_example_point_maps_exactly() {
        let sys = skew_plain();
        let q = sys.apply(TorusPoint::new(0.25, 0.5));
        assert_eq!(q.x, 0.5);
        assert_eq!(q.theta, 0.5);
    }

    #[test]
    fn zero_epsilon_freezes_theta() {
        for fam in [Family::one_sink(), Family::affine(5, 0.1, 3.0), Family::nonexample(5, 0.05, 0.02)] {
            let sys = System::new(fam, 0.0).unwrap();
            let mut rng = stream_rng(11, "frozen-theta", 0);
            for _ in 0..10_000 {
                let p = TorusPoint::new(rng.gen(), rng.gen());
                assert_eq!(sys.apply(p).theta, p.theta);
            }
        }
    }

    #[test]
    fn outputs_stay_in_fundamental_domain() {
        let systems = [
            System::new(Family::one_sink(), 1e-3).unwrap(),
            System::new(Family::two_sink_ergodic(), 0.05).unwrap(),
            System::new(Family::affine(5, 0.1, 3.0), 0.01).unwrap(),
            System::new(Family::nonexample(5, 0.05, 0.02), 1e-3).unwrap(),
        ];
        let mut rng = stream_rng(3, "domain", 0);
        for _ in 0..100_000 {
            let p = TorusPoint::new(rng.gen::<f64>() * 5.0 - 2.0, rng.gen::<f64>() * 5.0 - 2.0);
            let sys = &systems[rng.gen_range(0..systems.len())];
            let q = sys.apply(p);
            assert!((0.0..1.0).contains(&q.x) && (0.0..1.0).contains(&q.theta), "{q:?}");
        }
    }

    #[test]
    fn theta_steps_are_bounded_by_eps_sup_omega() {
        let sys = System::new(Family::two_sink_ergodic(), 0.02).unwrap();
        let mut rng = stream_rng(4, "step-bound", 0);
        for _ in 0..100_000 {
            let p = TorusPoint::new(rng.gen(), rng.gen());
            let q = sys.apply(p);
            let step = crate::circle::signed_delta(p.theta, q.theta).abs();
            assert!(step <= sys.epsilon * sys.sup_omega + 1e-15);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let systems = [
            System::new(Family::one_sink(), 1e-3).unwrap(),
            System::new(Family::affine(5, 0.1, 3.0), 0.01).unwrap(),
            System::new(Family::nonexample(5, 0.05, 0.02), 1e-3).unwrap(),
        ];
        let h = 1e-6;
        let mut rng = stream_rng(5, "fd-jacobian", 0);
        for _ in 0..1000 {
            let sys = &systems[rng.gen_range(0..systems.len())];
            // keep the stencil away from the wrap seam so lifts differ smoothly
            let x = 0.05 + 0.9 * rng.gen::<f64>();
            let th = 0.05 + 0.9 * rng.gen::<f64>();
            let j = sys.jacobian(TorusPoint::new(x, th));
            let fd = [
                [
                    (sys.f_lift(x + h, th) - sys.f_lift(x - h, th)) / (2.0 * h),
                    (sys.f_lift(x, th + h) - sys.f_lift(x, th - h)) / (2.0 * h),
                ],
                [
                    sys.epsilon * (sys.omega(x + h, th) - sys.omega(x - h, th)) / (2.0 * h),
                    1.0 + sys.epsilon * (sys.omega(x, th + h) - sys.omega(x, th - h)) / (2.0 * h),
                ],
            ];
            for r in 0..2 {
                for c in 0..2 {
                    assert!(
                        (j[r][c] - fd[r][c]).abs() < 1e-6,
                        "entry ({r},{c}): analytic {} vs fd {}",
                        j[r][c],
                        fd[r][c]
                    );
                }
            }
        }
    }

    #[test]
    fn nonexample_validity_threshold() {
        assert!(System::new(Family::nonexample(5, 0.05, 0.02), 1e-3).is_ok());
        // l - 2 pi (alpha + l beta) = 5 - 2 pi * 0.5 < 2
        assert!(System::new(Family::nonexample(5, 0.25, 0.05), 1e-3).is_err());
    }

    #[test]
    fn plateau_drive_shape() {
        let hat = HatShape::Plateau;
        assert!((hat.value(0.0) - 3.0).abs() < 1e-12);
        let mut min = f64::INFINITY;
        let mut mean = 0.0;
        let n = 1 << 14;
        for i in 0..n {
            let v = hat.value(i as f64 / n as f64);
            min = min.min(v);
            mean += v;
        }
        mean /= n as f64;
        assert!(min > -1.0 / 3.0, "plateau min {min} breaches -1/3");
        assert!(mean.abs() < 1e-12, "plateau mean {mean}");
    }

    #[test]
    fn composition_matches_repeated_application() {
        let sys = System::new(Family::one_sink(), 1e-3).unwrap();
        let mut p = TorusPoint::new(0.1, 0.3);
        for _ in 0..1000 {
            p = sys.apply(p);
        }
        assert_eq!(p, sys.apply_n(TorusPoint::new(0.1, 0.3), 1000));
    }
}
