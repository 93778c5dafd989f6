//! Randomized property suites for the σ_k inequalities and the pointwise
//! geometry, with per-property counts of checked, skipped and failed samples.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::geometry::{point_geometry, PointJet};
use crate::symfun::sampling::{random_orthogonal, random_symmetric, sample_gamma_k};
use crate::symfun::{
    quadratic_bound_slack, concavity_terms, sigma_all, sigma_grad, sigma_hess_quadform, sigma_matrix,
    SymMatrix, MAX_DIM,
};

/// Relative slack applied to the inequality suites.
pub const SUITE_SLACK: f64 = 1e-10;
/// Every this many samples the suites feed a matrix on `∂Γ_k`.
const BOUNDARY_EVERY: usize = 100;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PropertyStats {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub failed: usize,
    /// Smallest slack over checked samples, scaled as the tolerance is.
    pub min_gap: f64,
    /// Text dump of the first failing sample.
    pub first_failure: Option<String>,
}

impl PropertyStats {
    fn new(name: &str) -> Self {
        Self { name: name.into(), min_gap: f64::INFINITY, ..Default::default() }
    }

    fn record(&mut self, gap: f64, ok: bool, dump: impl FnOnce() -> String) {
        self.checked += 1;
        self.min_gap = self.min_gap.min(gap);
        if !ok {
            self.failed += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(dump());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failed == 0 && self.checked > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub n: usize,
    pub k: usize,
    pub samples: usize,
    pub seed: u64,
    pub properties: Vec<PropertyStats>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(PropertyStats::passed)
    }

    pub fn get(&self, name: &str) -> Option<&PropertyStats> {
        self.properties.iter().find(|p| p.name == name)
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "# n={} k={} samples={} seed={}", self.n, self.k, self.samples, self.seed)?;
        writeln!(out, "property,checked,skipped,failed,min_gap,passed")?;
        for p in &self.properties {
            writeln!(
                out,
                "{},{},{},{},{:.16e},{}",
                p.name,
                p.checked,
                p.skipped,
                p.failed,
                p.min_gap,
                p.passed()
            )?;
        }
        for p in &self.properties {
            if let Some(dump) = &p.first_failure {
                writeln!(out, "# first failure in {}: {}", p.name, dump)?;
            }
        }
        Ok(())
    }
}

fn dump_matrix(m: &SymMatrix) -> String {
    let n = m.dim();
    let rows: Vec<String> = (0..n)
        .map(|i| (0..n).map(|j| format!("{:.17e}", m.get(i, j))).collect::<Vec<_>>().join(" "))
        .collect();
    format!("[{}]", rows.join("; "))
}

/// A diagonal matrix with `σ_k = 0` and `σ_j > 0` for `j < k`. Entries are
/// dyadic so `σ_k` vanishes exactly in floating point; a generic rotation
/// would push it to either side of the boundary.
fn boundary_sample<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> SymMatrix {
    let lambda: Vec<f64> = match (n, k) {
        (_, k) if k == n => {
            let mut l = vec![1.0; n];
            l[0] = 0.0;
            l
        }
        // σ_2(1, 1, -1/2) = 0
        (3, 2) => vec![1.0, 1.0, -0.5],
        // σ_1(1, -1) = 0 and σ_1(1, 1, -2) = 0
        (2, 1) => vec![1.0, -1.0],
        _ => vec![1.0, 1.0, -2.0],
    };
    let s = [0.5, 1.0, 2.0][rng.random_range(0..3)];
    SymMatrix::diag(&lambda.iter().map(|l| l * s).collect::<Vec<_>>())
}

/// Runs every suite that applies to `(n, k)`. The concavity and quadratic-bound
/// suites need `k ≥ 2` and are left out of the report for `k = 1`.
pub fn run_property_suites(n: usize, k: usize, samples: usize, seed: u64) -> Result<SuiteReport> {
    if !(1..=MAX_DIM).contains(&n) || k == 0 || k > n {
        return invalid(format!("need 1 ≤ k ≤ n ≤ {MAX_DIM}, got n = {n}, k = {k}"));
    }
    if samples == 0 {
        return invalid("suite needs at least one sample");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut key = PropertyStats::new("concavity");
    let mut cor = PropertyStats::new("quadratic_bound");
    let mut grad = PropertyStats::new("sigma_grad_fd");
    let mut hess = PropertyStats::new("sigma_hess_fd");
    let mut frame = PropertyStats::new("frame_invariance");

    for i in 0..samples {
        let boundary = i % BOUNDARY_EVERY == BOUNDARY_EVERY - 1;
        let a = if boundary { boundary_sample(n, k, &mut rng) } else { sample_gamma_k(n, k, &mut rng) };
        let b = random_symmetric(n, &mut rng);

        if k >= 2 {
            match concavity_terms(k, &a, &b) {
                Ok(t) => {
                    let gap = t.gap() / (1.0 + t.lhs.abs());
                    key.record(gap, gap >= -SUITE_SLACK, || {
                        format!("A={} B={}", dump_matrix(&a), dump_matrix(&b))
                    });
                    let r = t.dsigma_k / t.sigma_k - t.dsigma_1 / t.sigma_1;
                    match quadratic_bound_slack(k, &a, &b, r) {
                        Ok(slack) => {
                            let gap = slack / (1.0 + t.lhs.abs());
                            cor.record(gap, gap >= -SUITE_SLACK, || {
                                format!("A={} B={} r={r:.17e}", dump_matrix(&a), dump_matrix(&b))
                            });
                        }
                        Err(Error::Precondition(_)) => cor.skipped += 1,
                        Err(e) => return Err(e),
                    }
                }
                Err(Error::Precondition(_)) => {
                    key.skipped += 1;
                    cor.skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }

        // derivative checks apply to any symmetric A
        let h = 1e-6;
        let sk = |e: f64| sigma_matrix(k, &a.add(&b.scale(e))).expect("valid order");
        let fd = (sk(h) - sk(-h)) / (2.0 * h);
        let an = sigma_grad(k, &a)?.contract(&b);
        let err = (fd - an).abs();
        grad.record(-err, err <= 1e-6, || format!("A={} B={}", dump_matrix(&a), dump_matrix(&b)));

        let h2 = 1e-3;
        let fd2 = (sk(h2) - 2.0 * sk(0.0) + sk(-h2)) / (h2 * h2);
        let an2 = sigma_hess_quadform(k, &a, &b)?;
        let err = (fd2 - an2).abs();
        hess.record(-err, err <= 1e-5, || format!("A={} B={}", dump_matrix(&a), dump_matrix(&b)));

        let (err, scale) = frame_rotation_error(n, k, &mut rng)?;
        frame.record(-err / scale, err <= 1e-12 * scale, || format!("sample {i}"));
    }
    let mut properties = Vec::new();
    if k >= 2 {
        properties.push(key);
        properties.push(cor);
    }
    properties.extend([grad, hess, frame]);
    Ok(SuiteReport { n, k, samples, seed, properties })
}

/// Largest change in density, support, curvatures and `σ_k` when the tangent
/// frame of a random jet is rotated, with the scale of the compared values.
fn frame_rotation_error<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<(f64, f64)> {
    let rho: f64 = rng.random_range(0.5..2.0);
    let mut grad = [0.0; MAX_DIM];
    for g in grad.iter_mut().take(n) {
        *g = 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
    let hess = random_symmetric(n, rng).scale(0.3);
    let jet = PointJet { rho, grad, hess: hess.clone() };
    let q = random_orthogonal(n, rng);
    let mut grad_r = [0.0; MAX_DIM];
    for (a, g) in grad_r.iter_mut().enumerate().take(n) {
        *g = (0..n).map(|b| q.get(b, a) * grad[b]).sum();
    }
    let rotated = PointJet { rho, grad: grad_r, hess: hess.conjugate(&q) };
    let p = point_geometry(&jet)?;
    let r = point_geometry(&rotated)?;
    let sp = sigma_all(&p.kappa);
    let sr = sigma_all(&r.kappa);
    let mut err = (p.density - r.density).abs().max((p.support - r.support).abs());
    let mut scale = 1.0 + p.density.abs() + p.support.abs();
    for (x, y) in p.kappa.iter().zip(&r.kappa) {
        err = err.max((x - y).abs());
        scale = scale.max(1.0 + x.abs());
    }
    err = err.max((sp[k] - sr[k]).abs());
    scale = scale.max(1.0 + sp[k].abs());
    Ok((err, scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_and_skip_boundary_samples() {
        for (n, k) in [(2, 2), (3, 2), (3, 3)] {
            let r = run_property_suites(n, k, 500, 11).unwrap();
            assert!(r.passed(), "{r:?}");
            let key = r.get("concavity").unwrap();
            assert_eq!(key.skipped, 5);
            assert_eq!(key.checked, 495);
        }
        let r = run_property_suites(3, 1, 100, 1).unwrap();
        assert!(r.passed());
        assert!(r.get("concavity").is_none());
    }

    #[test]
    fn boundary_samples_sit_on_the_cone_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (n, k) in [(2, 1), (2, 2), (3, 1), (3, 2), (3, 3)] {
            let a = boundary_sample(n, k, &mut rng);
            let s = sigma_matrix(k, &a).unwrap();
            assert_eq!(s, 0.0, "({n},{k})");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(run_property_suites(3, 4, 10, 0).is_err());
        assert!(run_property_suites(3, 2, 0, 0).is_err());
    }

    #[test]
    fn report_is_reproducible() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        run_property_suites(3, 2, 50, 4).unwrap().write(&mut a).unwrap();
        run_property_suites(3, 2, 50, 4).unwrap().write(&mut b).unwrap();
        assert_eq!(a, b);
    }
}
