//! driftlab-core: numerics for fast-slow skew systems over expanding circle maps.
//!
//! The object of study is the family F_eps(x, theta) = (f(x, theta), theta + eps*omega(x, theta))
//! on the two-torus, with f expanding in x (derivative >= lambda > 2) and the second
//! coordinate crawling at speed eps. The crate layers:
//!
//! * [`system`] - the map families, their partial derivatives, and validity checks;
//! * [`fiber`] - per-theta transfer operators (Ulam), invariant densities, drift and
//!   Green-Kubo variance of the drive, periodic-orbit averages;
//! * [`center`] - contracting-cone constants, the invariant center slope field, the
//!   per-step center expansion rate psi and its Birkhoff sums;
//! * [`averaged`] - the slow vector field omega_bar, its zeros and basins, the averaged
//!   ODE, and A2-style normalization;
//! * [`admissible`] - intervals Omega(theta) of realizable drive averages, forbidden-path
//!   certificates, reach and trapping sets, and assumption verdicts;
//! * [`ensemble`] - standard pairs, particle ensembles, and evolution traces against the
//!   averaged dynamics;
//! * [`stats`] - local CLT checks, correlation decay, metastability, stationary
//!   histograms, and a vertical Wasserstein distance;
//! * [`wf`] - the drift-diffusion comparison model: stationary density, discrete
//!   generator, spectral gap, Euler-Maruyama paths;
//! * [`coupling`] - standard-pair pushforward decompositions, holonomy maps between
//!   stacked pairs, and the contraction bookkeeping of one coupling step.

pub mod admissible;
pub mod averaged;
pub mod center;
pub mod circle;
pub mod coupling;
pub mod ensemble;
pub mod fiber;
pub mod rng;
pub mod stats;
pub mod system;
pub mod trig;
pub mod wf;
