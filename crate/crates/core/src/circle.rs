//! Points and distances on the unit circle R/Z, plus periodic grids and
//! periodic cubic interpolation shared by the averaged-field and diffusion
//! modules.

/// Wrap to the fundamental domain [0, 1). `wrap(1.0) == 0.0`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let y = x - x.floor();
    // x.floor() == x for integers, so y is already in [0,1) except when a
    // negative x within one ulp of an integer rounds the subtraction up.
    if y >= 1.0 {
        0.0
    } else {
        y
    }
}

/// Minimal-image distance on R/Z, in [0, 1/2].
#[inline]
pub fn dist(a: f64, b: f64) -> f64 {
    let d = (wrap(a) - wrap(b)).abs();
    d.min(1.0 - d)
}

/// Signed displacement from a to b along the shorter arc, in (-1/2, 1/2].
#[inline]
pub fn signed_delta(a: f64, b: f64) -> f64 {
    let d = wrap(b) - wrap(a);
    if d > 0.5 {
        d - 1.0
    } else if d <= -0.5 {
        d + 1.0
    } else {
        d
    }
}

/// True if theta lies on the (forward) closed arc from lo to hi.
/// The arc is traversed from lo in increasing direction, wrapping if hi < lo.
#[inline]
pub fn arc_contains(lo: f64, hi: f64, theta: f64) -> bool {
    let lo = wrap(lo);
    let hi = wrap(hi);
    let t = wrap(theta);
    if lo <= hi {
        t >= lo && t <= hi
    } else {
        t >= lo || t <= hi
    }
}

/// Length of the forward arc from lo to hi.
#[inline]
pub fn arc_len(lo: f64, hi: f64) -> f64 {
    wrap(hi - lo)
}

/// Uniform periodic grid with n cells; node i sits at i/n.
#[derive(Clone, Debug)]
pub struct Grid {
    pub n: usize,
}

impl Grid {
    pub fn new(n: usize) -> Self {
        assert!(n >= 2, "grid needs at least two cells");
        Grid { n }
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        i as f64 / self.n as f64
    }

    #[inline]
    pub fn cell_of(&self, theta: f64) -> usize {
        let i = (wrap(theta) * self.n as f64) as usize;
        i.min(self.n - 1)
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |i| self.node(i))
    }
}

/// Periodic cubic (Catmull-Rom) interpolation of samples at nodes i/n.
/// C^1, reproduces cubics locally, and is exactly periodic by construction.
#[derive(Clone, Debug)]
pub struct PeriodicCubic {
    values: Vec<f64>,
}

impl PeriodicCubic {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(values.len() >= 4, "cubic interpolation needs >= 4 samples");
        PeriodicCubic { values }
    }

    pub fn samples(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn v(&self, i: isize) -> f64 {
        let n = self.values.len() as isize;
        self.values[(i.rem_euclid(n)) as usize]
    }

    /// Value at theta (any real; wraps).
    pub fn eval(&self, theta: f64) -> f64 {
        let n = self.values.len() as f64;
        let s = wrap(theta) * n;
        let i = s.floor();
        let t = s - i;
        let i = i as isize;
        let (p0, p1, p2, p3) = (self.v(i - 1), self.v(i), self.v(i + 1), self.v(i + 2));
        // Catmull-Rom in Horner form.
        let a = -0.5 * p0 + 1.5 * p1 - 1.5 * p2 + 0.5 * p3;
        let b = p0 - 2.5 * p1 + 2.0 * p2 - 0.5 * p3;
        let c = 0.5 * (p2 - p0);
        ((a * t + b) * t + c) * t + p1
    }

    /// Derivative at theta with respect to theta (chain rule through the cell scale).
    pub fn deriv(&self, theta: f64) -> f64 {
        let n = self.values.len() as f64;
        let s = wrap(theta) * n;
        let i = s.floor();
        let t = s - i;
        let i = i as isize;
        let (p0, p1, p2, p3) = (self.v(i - 1), self.v(i), self.v(i + 1), self.v(i + 2));
        let a = -0.5 * p0 + 1.5 * p1 - 1.5 * p2 + 0.5 * p3;
        let b = p0 - 2.5 * p1 + 2.0 * p2 - 0.5 * p3;
        let c = 0.5 * (p2 - p0);
        ((3.0 * a * t + 2.0 * b) * t + c) * n
    }
}

/// Kahan compensated accumulator; the zeta sums add ~1e6 terms of mixed sign
/// and the additivity contract is 1e-12.
#[derive(Clone, Copy, Debug, Default)]
pub struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}
