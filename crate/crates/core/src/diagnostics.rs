//! Checks of hypotheses and conclusions on concrete data: convexity of the
//! potential built from `f`, strict convexity of a surface, and the radius
//! and curvature bounds along a homotopy.

mod properties;

pub use properties::{run_property_suites, PropertyStats, SuiteReport, SUITE_SLACK};

use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::function::SphereFunction;
use crate::geometry::point_geometry;
use crate::grid::RadialField;
use crate::solver::HomotopyState;

/// Minimum Hessian eigenvalue accepted as convex.
pub const CONVEXITY_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    /// Reserved for checks that can neither confirm nor refute.
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// Sampling evidence for convexity of
/// `φ(X) = |X|^{(n+1)/k} f(X/|X|)^{-1/k} + δ|X|²` on `1/2 ≤ |X| ≤ 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexityCertificate {
    pub n: usize,
    pub k: usize,
    pub delta: f64,
    pub sample_count: usize,
    pub seed: u64,
    pub min_hessian_eigenvalue: f64,
    pub verdict: Verdict,
    /// Sample point with the smallest eigenvalue, reported on failure.
    pub witness: Option<Vec<f64>>,
}

impl ConvexityCertificate {
    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "key,value")?;
        writeln!(out, "condition,{}", if self.delta > 0.0 { "shifted" } else { "plain" })?;
        writeln!(out, "n,{}", self.n)?;
        writeln!(out, "k,{}", self.k)?;
        writeln!(out, "delta,{:.16e}", self.delta)?;
        writeln!(out, "samples,{}", self.sample_count)?;
        writeln!(out, "seed,{}", self.seed)?;
        writeln!(out, "evidence,sampling")?;
        writeln!(out, "min_hessian_eigenvalue,{:.16e}", self.min_hessian_eigenvalue)?;
        writeln!(out, "verdict,{}", self.verdict)?;
        if let Some(w) = &self.witness {
            let s: Vec<String> = w.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "witness,{}", s.join(" "))?;
        }
        Ok(())
    }
}

/// `|X|^{(n+1)/k} f(X/|X|)^{-1/k}`, the part of the potential built from `f`.
pub fn convexity_potential(f: &dyn SphereFunction, n: usize, k: usize, x: &[f64]) -> f64 {
    let r = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let z: Vec<f64> = x.iter().map(|a| a / r).collect();
    r.powf((n + 1) as f64 / k as f64) * f.eval(&z).powf(-1.0 / k as f64)
}

fn min_hessian_eigenvalue(f: &dyn SphereFunction, n: usize, k: usize, delta: f64, x: &[f64]) -> f64 {
    let d = n + 1;
    let r = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let h = 1e-4 * r;
    let phi = |y: &[f64]| convexity_potential(f, n, k, y);
    let at = |a: usize, da: f64, b: usize, db: f64| {
        let mut y = x.to_vec();
        y[a] += da;
        y[b] += db;
        phi(&y)
    };
    let f0 = phi(x);
    let mut m = DMatrix::<f64>::zeros(d, d);
    for a in 0..d {
        m[(a, a)] = (at(a, h, a, 0.0) - 2.0 * f0 + at(a, -h, a, 0.0)) / (h * h) + 2.0 * delta;
        for b in 0..a {
            let v = (at(a, h, b, h) - at(a, h, b, -h) - at(a, -h, b, h) + at(a, -h, b, -h))
                / (4.0 * h * h);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Samples `X` in the annulus `1/2 ≤ |X| ≤ 2` and checks the numerical
/// Hessian of `φ` there. Sample points depend only on `(n, samples, seed)`.
pub fn check_f_convexity(
    f: &dyn SphereFunction,
    n: usize,
    k: usize,
    delta: f64,
    samples: usize,
    seed: u64,
) -> Result<ConvexityCertificate> {
    if n != 2 && n != 3 {
        return invalid(format!("unsupported dimension {n}"));
    }
    if k == 0 || k > n {
        return invalid(format!("order k = {k} must be in 1..={n}"));
    }
    if !(delta >= 0.0) {
        return invalid("delta must be non-negative");
    }
    if samples == 0 {
        return invalid("convexity check needs at least one sample");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = Uniform::new_inclusive(0.5, 2.0).expect("valid range");
    let points: Vec<Vec<f64>> = (0..samples)
        .map(|_| {
            let g: Vec<f64> = (0..=n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = g.iter().map(|a: &f64| a * a).sum::<f64>().sqrt();
            let r = radius.sample(&mut rng);
            g.iter().map(|a| a * r / norm).collect()
        })
        .collect();
    for p in &points {
        let r = p.iter().map(|a| a * a).sum::<f64>().sqrt();
        let z: Vec<f64> = p.iter().map(|a| a / r).collect();
        let v = f.eval(&z);
        if !(v > 0.0) {
            return Err(Error::Precondition(format!("f = {v} at a sampled direction")));
        }
    }
    let eigs: Vec<f64> =
        points.par_iter().map(|p| min_hessian_eigenvalue(f, n, k, delta, p)).collect();
    let (imin, &emin) = eigs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least one sample");
    let pass = emin >= -CONVEXITY_TOL;
    Ok(ConvexityCertificate {
        n,
        k,
        delta,
        sample_count: samples,
        seed,
        min_hessian_eigenvalue: emin,
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
        witness: if pass { None } else { Some(points[imin].clone()) },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrictConvexityReport {
    pub min_kappa: f64,
    pub min_kappa_node: usize,
    /// Smallest eigenvalue of the second fundamental form in the frame.
    pub min_second_ff_eigenvalue: f64,
    pub verdict: Verdict,
}

impl StrictConvexityReport {
    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "key,value")?;
        writeln!(out, "min_kappa,{:.16e}", self.min_kappa)?;
        writeln!(out, "min_kappa_node,{}", self.min_kappa_node)?;
        writeln!(out, "min_second_ff_eigenvalue,{:.16e}", self.min_second_ff_eigenvalue)?;
        writeln!(out, "verdict,{}", self.verdict)?;
        Ok(())
    }
}

/// Smallest principal curvature over all nodes; the surface is reported
/// strictly convex when it is positive.
pub fn check_strict_convexity(field: &RadialField) -> Result<StrictConvexityReport> {
    let jets = field.jets();
    let mut min_kappa = f64::INFINITY;
    let mut node = 0;
    let mut min_h = f64::INFINITY;
    for (i, jet) in jets.iter().enumerate() {
        let geo = point_geometry(jet)?;
        if geo.kappa[0] < min_kappa {
            min_kappa = geo.kappa[0];
            node = i;
        }
        min_h = min_h.min(geo.second_ff.eigenvalues()[0]);
    }
    Ok(StrictConvexityReport {
        min_kappa,
        min_kappa_node: node,
        min_second_ff_eigenvalue: min_h,
        verdict: if min_kappa > 0.0 { Verdict::Pass } else { Verdict::Fail },
    })
}

/// Audit of one accepted homotopy state.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub t: f64,
    pub lower: f64,
    pub upper: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub tolerance: f64,
    /// How far the radius leaves `[lower, upper]`.
    pub pinch_violation: f64,
    pub max_grad: f64,
    pub max_h_over_u: f64,
    pub max_a2: f64,
    pub min_kappa_margin: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundAudit {
    pub rows: Vec<AuditRow>,
}

impl BoundAudit {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(
            out,
            "t,lower,upper,rho_min,rho_max,tolerance,pinch_violation,max_grad,max_h_over_u,max_a2,min_kappa_margin,passed"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                r.t,
                r.lower,
                r.upper,
                r.rho_min,
                r.rho_max,
                r.tolerance,
                r.pinch_violation,
                r.max_grad,
                r.max_h_over_u,
                r.max_a2,
                r.min_kappa_margin,
                r.passed
            )?;
        }
        Ok(())
    }
}

/// Checks radius pinching at every state with tolerance
/// `factor · (discretization estimate + newton_tol)`, and that every state
/// is admissible. Gradient and curvature monitors are reported, not enforced.
pub fn audit_bounds(states: &[HomotopyState], factor: f64, newton_tol: f64) -> BoundAudit {
    let rows = states
        .iter()
        .map(|s| {
            let b = &s.bounds;
            let tolerance = factor * (s.discretization_error.unwrap_or(0.0) + newton_tol);
            let pinch_violation = b.violation();
            AuditRow {
                t: s.t,
                lower: b.lower,
                upper: b.upper,
                rho_min: b.rho_min,
                rho_max: b.rho_max,
                tolerance,
                pinch_violation,
                max_grad: b.max_grad,
                max_h_over_u: s.max_h_over_u,
                max_a2: s.max_a2,
                min_kappa_margin: s.min_kappa_margin,
                passed: pinch_violation <= tolerance && s.min_kappa_margin > 0.0,
            }
        })
        .collect();
    BoundAudit { rows }
}
