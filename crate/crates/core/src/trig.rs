//! Trigonometric kernels in turn units: `sin2pi(u) = sin(2*pi*u)`.
//!
//! The hot loops of this crate evaluate sines of multiples of 2*pi*x millions of
//! times per second, and several map identities require exact zeros at the
//! cardinal points (sin(2*pi*u) must vanish *exactly* at u = 0.5, which
//! `f64::sin(2.0*PI*u)` cannot deliver because 2*pi*u already rounds).
//! Working in turns makes the quarter-wave range reduction exact: the reduced
//! argument t = u - k/4 is a difference of nearby dyadics, hence exact, so the
//! only error is the polynomial tail (< 2 ulp; pinned against std in tests).

/// sin(2*pi*t) / t Taylor coefficients in t^2, valid for |t| <= 1/8.
const S: [f64; 9] = [
    6.283185307179586,
    -41.34170224039976,
    81.60524927607506,
    -76.70585975306139,
    42.058693944897655,
    -15.09464257682299,
    3.819952584848282,
    -0.7181223017785006,
    0.10422916220813984,
];

/// cos(2*pi*t) Taylor coefficients in t^2, valid for |t| <= 1/8.
const C: [f64; 10] = [
    1.0,
    -19.739208802178716,
    64.9393940226683,
    -85.45681720669373,
    60.24464137187666,
    -26.4262567833744,
    7.903536371318469,
    -1.714390711088672,
    0.28200596845579123,
    -0.03638284114254567,
];

#[inline]
fn sin_kernel(t: f64) -> f64 {
    let t2 = t * t;
    let mut p = S[8];
    for k in (0..8).rev() {
        p = p * t2 + S[k];
    }
    t * p
}

#[inline]
fn cos_kernel(t: f64) -> f64 {
    let t2 = t * t;
    let mut p = C[9];
    for k in (0..9).rev() {
        p = p * t2 + C[k];
    }
    p
}

/// Quarter index k = round(4*fract(u)) and exact residual t = fract(u) - k/4.
#[inline]
fn reduce(u: f64) -> (i32, f64) {
    let v = u - u.floor();
    let k = (4.0 * v + 0.5).floor();
    (k as i32, v - 0.25 * k)
}

/// sin(2*pi*u), exact at quarter turns, ~1 ulp elsewhere.
#[inline]
pub fn sin2pi(u: f64) -> f64 {
    let (k, t) = reduce(u);
    match k & 3 {
        0 => sin_kernel(t),
        1 => cos_kernel(t),
        2 => -sin_kernel(t),
        _ => -cos_kernel(t),
    }
}

/// cos(2*pi*u), exact at quarter turns, ~1 ulp elsewhere.
#[inline]
pub fn cos2pi(u: f64) -> f64 {
    let (k, t) = reduce(u);
    match k & 3 {
        0 => cos_kernel(t),
        1 => -sin_kernel(t),
        2 => -cos_kernel(t),
        _ => sin_kernel(t),
    }
}
