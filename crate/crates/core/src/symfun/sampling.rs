//! Random matrices for the concavity property suites.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{matrix_in_gamma_k, SquareMatrix, SymMatrix};

/// Haar-distributed orthogonal matrix via QR of a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> SquareMatrix {
    let g = nalgebra::DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let q = qr.q();
    let r = qr.r();
    // fix column signs so the distribution is uniform
    SquareMatrix::from_fn(n, |i, j| {
        let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        s * q[(i, j)]
    })
}

/// Symmetric matrix with independent standard normal upper-triangle entries.
pub fn random_symmetric<R: Rng + ?Sized>(n: usize, rng: &mut R) -> SymMatrix {
    SymMatrix::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Samples `A ∈ Γ_k`: eigenvalues uniform in `[-1, 2]^n`, rejected until they
/// lie in `Γ_k`, then conjugated by a random rotation.
pub fn sample_gamma_k<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> SymMatrix {
    loop {
        let lambda: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();
        let d = SymMatrix::diag(&lambda);
        if !matrix_in_gamma_k(k, d.as_square()) {
            continue;
        }
        let q = random_orthogonal(n, rng);
        let a = d.conjugate(&q);
        // conjugation round-off can push a boundary sample out of the cone
        if matrix_in_gamma_k(k, a.as_square()) {
            return a;
        }
    }
}
