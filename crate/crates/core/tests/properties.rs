use curvature_measure::diagnostics::check_f_convexity;
use curvature_measure::geometry::{point_geometry, PointJet};
use curvature_measure::symfun::sampling::{random_orthogonal, random_symmetric, sample_gamma_k};
use curvature_measure::symfun::{
    concavity_gap, sigma, sigma_all, sigma_grad, sigma_matrix, SymMatrix, MAX_DIM,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn lambda_strategy() -> impl Strategy<Value = Vec<f64>> {
    (2usize..=3).prop_flat_map(|n| prop::collection::vec(-3.0f64..3.0, n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sigma_is_symmetric(lambda in lambda_strategy(), shift in 0usize..3) {
        let mut p = lambda.clone();
        p.rotate_left(shift % lambda.len());
        p.swap(0, lambda.len() - 1);
        for k in 0..=lambda.len() {
            let a = sigma(k, &lambda).unwrap();
            let b = sigma(k, &p).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn sigma_matrix_is_conjugation_invariant(seed in any::<u64>(), n in 2usize..=3) {
        let mut r = rng(seed);
        let a = random_symmetric(n, &mut r);
        let q = random_orthogonal(n, &mut r);
        let b = a.conjugate(&q);
        for k in 1..=n {
            let sa = sigma_matrix(k, &a).unwrap();
            let sb = sigma_matrix(k, &b).unwrap();
            prop_assert!((sa - sb).abs() <= 1e-12 * (1.0 + sa.abs()), "k={} {} {}", k, sa, sb);
        }
    }

    #[test]
    fn sigma_grad_satisfies_euler(seed in any::<u64>(), n in 2usize..=3) {
        let a = random_symmetric(n, &mut rng(seed));
        for k in 1..=n {
            let lhs = sigma_grad(k, &a).unwrap().contract(&a);
            let rhs = k as f64 * sigma_matrix(k, &a).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn concavity_gap_is_nonnegative(seed in any::<u64>(), k in 2usize..=3) {
        let mut r = rng(seed);
        let a = sample_gamma_k(3, k, &mut r);
        let b = random_symmetric(3, &mut r);
        let gap = concavity_gap(k, &a, &b).unwrap();
        let lhs = curvature_measure::symfun::sigma_hess_quadform(k, &a, &b).unwrap();
        prop_assert!(gap >= -1e-10 * (1.0 + lhs.abs()), "gap {}", gap);
    }

    #[test]
    fn geometry_ignores_frame_rotation(seed in any::<u64>(), n in 2usize..=3) {
        let mut r = rng(seed);
        let hess = random_symmetric(n, &mut r).scale(0.4);
        let q = random_orthogonal(n, &mut r);
        let g = random_symmetric(n, &mut r);
        let mut grad = [0.0; MAX_DIM];
        for (a, v) in grad.iter_mut().enumerate().take(n) {
            *v = 0.3 * g.get(a, a);
        }
        let mut grad_r = [0.0; MAX_DIM];
        for (a, v) in grad_r.iter_mut().enumerate().take(n) {
            *v = (0..n).map(|b| q.get(b, a) * grad[b]).sum();
        }
        let p = point_geometry(&PointJet { rho: 1.3, grad, hess: hess.clone() }).unwrap();
        let s = point_geometry(&PointJet { rho: 1.3, grad: grad_r, hess: hess.conjugate(&q) }).unwrap();
        prop_assert!((p.density - s.density).abs() < 1e-12);
        prop_assert!((p.support - s.support).abs() < 1e-12);
        for (x, y) in p.kappa.iter().zip(&s.kappa) {
            prop_assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()));
        }
    }

    /// Scaling the surface by `c` divides curvatures by `c` and multiplies
    /// the area density by `c^n`.
    #[test]
    fn geometry_scales(seed in any::<u64>(), n in 2usize..=3, c in 0.2f64..5.0) {
        let mut r = rng(seed);
        let hess = random_symmetric(n, &mut r).scale(0.3);
        let mut grad = [0.0; MAX_DIM];
        grad[0] = 0.2;
        let jet = PointJet { rho: 1.0, grad, hess: hess.clone() };
        let mut grad_c = grad;
        grad_c.iter_mut().for_each(|v| *v *= c);
        let scaled = PointJet { rho: c, grad: grad_c, hess: hess.scale(c) };
        let p = point_geometry(&jet).unwrap();
        let s = point_geometry(&scaled).unwrap();
        prop_assert!((s.density - c.powi(n as i32) * p.density).abs() < 1e-11 * s.density);
        for (x, y) in p.kappa.iter().zip(&s.kappa) {
            prop_assert!((x / c - y).abs() < 1e-11 * (1.0 + x.abs()));
        }
        let sp = sigma_all(&p.kappa);
        let ss = sigma_all(&s.kappa);
        for k in 1..=n {
            prop_assert!((ss[k] - sp[k] / c.powi(k as i32)).abs() < 1e-10 * (1.0 + sp[k].abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn convexity_eigenvalue_grows_with_delta(seed in any::<u64>(), d1 in 0.0f64..1.0, d2 in 0.0f64..1.0) {
        let f = |x: &[f64]| 1.0 + 0.4 * x[0] * x[1] + 0.2 * x[2];
        let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        let a = check_f_convexity(&f, 2, 1, lo, 64, seed).unwrap();
        let b = check_f_convexity(&f, 2, 1, hi, 64, seed).unwrap();
        prop_assert!(b.min_hessian_eigenvalue >= a.min_hessian_eigenvalue);
        prop_assert!((b.min_hessian_eigenvalue - a.min_hessian_eigenvalue - 2.0 * (hi - lo)).abs() < 1e-9);
    }
}

#[test]
fn diagonal_matrices_match_eigenvalue_sigma() {
    let a = SymMatrix::diag(&[1.0, -2.0, 0.5]);
    for k in 0..=3 {
        assert!((sigma_matrix(k, &a).unwrap() - sigma(k, &[1.0, -2.0, 0.5]).unwrap()).abs() < 1e-14);
    }
}
