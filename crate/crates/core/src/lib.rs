//! Numerical solver and verification toolkit for hypersurfaces of prescribed
//! curvature measure.
//!
//! A star-shaped hypersurface `M = {ρ(z) z : z ∈ S^n}` has `(n−k)`-th
//! curvature measure with density `σ_k(κ) ρ^{n-1} √(ρ² + |∇ρ|²)` against the
//! standard measure of `S^n`. Prescribing that density as `f` gives the fully
//! nonlinear equation solved by [`solver::continuity_solve`].

pub mod diagnostics;
pub mod error;
pub mod function;
pub mod geometry;
pub mod grid;
pub mod measures;
pub mod solver;
pub mod symfun;

pub use error::{Error, Result};

/// Binomial coefficient `C(n, k)` as a float.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
