//! Pointwise differential geometry of a radial graph `X = ρ(z) z` over `S^n`.
//!
//! All quantities are expressed in an orthonormal frame of the standard
//! sphere at `z`. With `w = √(ρ² + |∇ρ|²)`:
//!
//! * metric `g = ρ² I + ∇ρ ⊗ ∇ρ`, area density `ρ^{n-1} w`
//! * second fundamental form `h = (ρ² I + 2 ∇ρ ⊗ ∇ρ − ρ ∇²ρ) / w`
//! * outer normal `ν = (ρ z − ∇ρ) / w`, support function `u = ρ² / w`
//!
//! Principal curvatures are the eigenvalues of `h` relative to `g`.

use crate::error::{invalid, Result};
use crate::symfun::{SquareMatrix, SymMatrix, MAX_DIM};

/// Value, gradient and covariant Hessian of `ρ` at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointJet {
    pub rho: f64,
    pub grad: [f64; MAX_DIM],
    pub hess: SymMatrix,
}

impl PointJet {
    pub fn new(rho: f64, grad: &[f64], hess: SymMatrix) -> Result<Self> {
        let n = hess.dim();
        if grad.len() != n {
            return invalid(format!("gradient has {} entries, Hessian is {n}×{n}", grad.len()));
        }
        if !(rho > 0.0) {
            return invalid(format!("radius must be positive, got {rho}"));
        }
        let mut g = [0.0; MAX_DIM];
        g[..n].copy_from_slice(grad);
        Ok(Self { rho, grad: g, hess })
    }

    /// Jet of the constant field `ρ ≡ r`.
    pub fn constant(n: usize, r: f64) -> Self {
        Self { rho: r, grad: [0.0; MAX_DIM], hess: SymMatrix::zeros(n) }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.hess.dim()
    }

    #[inline]
    pub fn grad(&self) -> &[f64] {
        &self.grad[..self.dim()]
    }

    pub fn grad_norm_sq(&self) -> f64 {
        self.grad().iter().map(|x| x * x).sum()
    }

    /// `√(ρ² + |∇ρ|²)`
    pub fn w(&self) -> f64 {
        (self.rho * self.rho + self.grad_norm_sq()).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointGeometry {
    pub metric: SymMatrix,
    pub density: f64,
    pub second_ff: SymMatrix,
    /// Unit normal in the basis `(z, e_1, .., e_n)` of `R^{n+1}`.
    pub normal: Vec<f64>,
    pub support: f64,
    /// Principal curvatures, ascending.
    pub kappa: Vec<f64>,
    /// `g^{-1} h`
    pub weingarten: SquareMatrix,
}

fn metric(jet: &PointJet) -> SymMatrix {
    let r2 = jet.rho * jet.rho;
    let p = jet.grad();
    SymMatrix::from_fn(jet.dim(), |i, j| if i == j { r2 } else { 0.0 } + p[i] * p[j])
}

fn second_ff(jet: &PointJet, w: f64) -> SymMatrix {
    let r = jet.rho;
    let p = jet.grad();
    SymMatrix::from_fn(jet.dim(), |i, j| {
        let d = if i == j { r * r } else { 0.0 };
        (d + 2.0 * p[i] * p[j] - r * jet.hess.get(i, j)) / w
    })
}

fn inverse_metric(jet: &PointJet, w: f64) -> SymMatrix {
    let r2 = jet.rho * jet.rho;
    let p = jet.grad();
    let w2 = w * w;
    SymMatrix::from_fn(jet.dim(), |i, j| (if i == j { 1.0 } else { 0.0 } - p[i] * p[j] / w2) / r2)
}

/// Symmetric square root of `g^{-1}`: `(I − ∇ρ⊗∇ρ / (w(ρ + w))) / ρ`.
fn inverse_metric_sqrt(jet: &PointJet, w: f64) -> SymMatrix {
    let r = jet.rho;
    let p = jet.grad();
    let c = 1.0 / (w * (r + w));
    SymMatrix::from_fn(jet.dim(), |i, j| (if i == j { 1.0 } else { 0.0 } - c * p[i] * p[j]) / r)
}

pub fn point_geometry(jet: &PointJet) -> Result<PointGeometry> {
    if !(jet.rho > 0.0) {
        return invalid(format!("radius must be positive, got {}", jet.rho));
    }
    let n = jet.dim();
    let w = jet.w();
    let g = metric(jet);
    let h = second_ff(jet, w);
    let ginv = inverse_metric(jet, w);
    let weingarten = ginv.as_square().mul(h.as_square());
    let gamma = inverse_metric_sqrt(jet, w);
    let s = SymMatrix::symmetrize(&gamma.as_square().mul(h.as_square()).mul(gamma.as_square()));
    let kappa = s.eigenvalues();
    let mut normal = Vec::with_capacity(n + 1);
    normal.push(jet.rho / w);
    normal.extend(jet.grad().iter().map(|p| -p / w));
    Ok(PointGeometry {
        metric: g,
        density: jet.rho.powi(n as i32 - 1) * w,
        second_ff: h,
        normal,
        support: jet.rho * jet.rho / w,
        kappa,
        weingarten,
    })
}

/// `f · ρ^{1-n} (ρ² + |∇ρ|²)^{-1/2}`
pub fn equation_rhs(jet: &PointJet, f_value: f64) -> f64 {
    let n = jet.dim() as i32;
    f_value / (jet.rho.powi(n - 1) * jet.w())
}

/// `σ_k(κ) − f ρ^{1-n} (ρ² + |∇ρ|²)^{-1/2}`
pub fn residual_point(jet: &PointJet, k: usize, f_value: f64) -> Result<f64> {
    if k > jet.dim() {
        return invalid(format!("order k = {k} exceeds dimension {}", jet.dim()));
    }
    Ok(evaluate(jet, k, f_value).residual)
}

/// Everything the solver needs at one node: the residual, its partial
/// derivatives with respect to the jet entries, and the monitored scalars.
#[derive(Clone, Copy, Debug)]
pub struct PointEval {
    /// Characteristic coefficients `σ_0..σ_n` of the Weingarten map.
    pub sigmas: [f64; MAX_DIM + 1],
    pub residual: f64,
    pub d_rho: f64,
    pub d_grad: [f64; MAX_DIM],
    /// `∂G/∂(∇²ρ)_ab`, symmetric; contract over all ordered pairs.
    pub d_hess: SymMatrix,
    pub support: f64,
    /// `|A|² = Σ κ_i²`
    pub norm_a2: f64,
}

impl PointEval {
    /// `min_{i ≤ k} σ_i(κ)`, positive iff `κ ∈ Γ_k`.
    pub fn cone_margin(&self, k: usize) -> f64 {
        (1..=k).map(|i| self.sigmas[i]).fold(f64::INFINITY, f64::min)
    }

    pub fn mean_curvature(&self) -> f64 {
        self.sigmas[1]
    }
}

/// Residual and its analytic derivatives at one jet.
///
/// With `W = g^{-1} h`, `T` the Newton tensor of `W` and `P = T g^{-1}`,
/// `dσ_k = tr(P dh) − tr(W P dg)`.
pub fn evaluate(jet: &PointJet, k: usize, f_value: f64) -> PointEval {
    let n = jet.dim();
    let rho = jet.rho;
    let p = jet.grad();
    let w = jet.w();
    let w2 = w * w;
    let h = second_ff(jet, w);
    let ginv = inverse_metric(jet, w);
    let wm = ginv.as_square().mul(h.as_square());
    let sigmas = wm.char_coefficients();
    let norm_a2 = wm.mul(&wm).trace();

    let (sk, d_rho_s, d_grad_s, d_hess_s) = if k == 0 {
        (1.0, 0.0, [0.0; MAX_DIM], SymMatrix::zeros(n))
    } else {
        let t = wm.newton_tensor(k - 1);
        let pm = SymMatrix::symmetrize(&t.mul(ginv.as_square()));
        let qm = SymMatrix::symmetrize(&wm.mul(pm.as_square()));
        let p_h = pm.contract(&h);
        let p_hess = pm.contract(&jet.hess);
        let d_rho = (2.0 * rho * pm.trace() - p_hess) / w - rho * p_h / w2 - 2.0 * rho * qm.trace();
        let mut d_grad = [0.0; MAX_DIM];
        for a in 0..n {
            let pp: f64 = (0..n).map(|j| pm.get(a, j) * p[j]).sum();
            let qp: f64 = (0..n).map(|j| qm.get(a, j) * p[j]).sum();
            d_grad[a] = 4.0 * pp / w - p[a] * p_h / w2 - 2.0 * qp;
        }
        (sigmas[k], d_rho, d_grad, pm.scale(-rho / w))
    };

    let phi = equation_rhs(jet, f_value);
    let mut d_grad = d_grad_s;
    for a in 0..n {
        d_grad[a] += phi * p[a] / w2;
    }
    PointEval {
        sigmas,
        residual: sk - phi,
        d_rho: d_rho_s - phi * ((1.0 - n as f64) / rho - rho / w2),
        d_grad,
        d_hess: d_hess_s,
        support: rho * rho / w,
        norm_a2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn jet2(rho: f64, g: [f64; 2], h: [[f64; 2]; 2]) -> PointJet {
        PointJet::new(rho, &g, SymMatrix::from_fn(2, |i, j| h[i][j])).unwrap()
    }

    #[test]
    fn round_sphere() {
        let r = 2.5;
        let geo = point_geometry(&PointJet::constant(2, r)).unwrap();
        assert_eq!(geo.metric, SymMatrix::identity(2).scale(r * r));
        assert_eq!(geo.second_ff, SymMatrix::identity(2).scale(r));
        assert_eq!(geo.support, r);
        assert_eq!(geo.density, r * r);
        for &k in &geo.kappa {
            assert!((k - 1.0 / r).abs() < 1e-15);
        }
    }

    #[test]
    fn tilted_jet_values() {
        let jet = jet2(1.0, [0.3, 0.0], [[0.0; 2]; 2]);
        let geo = point_geometry(&jet).unwrap();
        assert!((geo.support - 1.0 / 1.09f64.sqrt()).abs() < 1e-15);
        assert!((geo.density - 1.09f64.sqrt()).abs() < 1e-15);
        let nn: f64 = geo.normal.iter().map(|x| x * x).sum();
        assert!((nn - 1.0).abs() < 1e-13);
    }

    /// Independent oracle: embed `X = ρ x` for `ρ = 1 − 0.3 cos θ` and
    /// differentiate the embedding numerically at the equator, where the
    /// jet is `ρ = 1`, `∇ρ = (0.3, 0)`, `∇²ρ = 0`.
    #[test]
    fn embedded_surface_oracle() {
        let x = |t: f64, p: f64| -> [f64; 3] {
            let r = 1.0 - 0.3 * t.cos();
            // polar axis along the first coordinate
            [r * t.cos(), r * t.sin() * p.cos(), r * t.sin() * p.sin()]
        };
        let (t0, p0) = (std::f64::consts::FRAC_PI_2, 0.0);
        let e = 1e-4;
        let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let sc = |s: f64, a: [f64; 3]| [s * a[0], s * a[1], s * a[2]];
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let xt = sc(0.5 / e, sub(x(t0 + e, p0), x(t0 - e, p0)));
        let xp = sc(0.5 / e, sub(x(t0, p0 + e), x(t0, p0 - e)));
        let c = x(t0, p0);
        let xtt = sc(1.0 / (e * e), sub(sub(x(t0 + e, p0), c), sub(c, x(t0 - e, p0))));
        let xpp = sc(1.0 / (e * e), sub(sub(x(t0, p0 + e), c), sub(c, x(t0, p0 - e))));
        let xtp = sc(
            0.25 / (e * e),
            sub(sub(x(t0 + e, p0 + e), x(t0 + e, p0 - e)), sub(x(t0 - e, p0 + e), x(t0 - e, p0 - e))),
        );
        let mut nrm = [
            xt[1] * xp[2] - xt[2] * xp[1],
            xt[2] * xp[0] - xt[0] * xp[2],
            xt[0] * xp[1] - xt[1] * xp[0],
        ];
        let l = dot(nrm, nrm).sqrt();
        nrm = sc(1.0 / l, nrm);
        if dot(nrm, c) < 0.0 {
            nrm = sc(-1.0, nrm);
        }
        // h_ij = <∂_i X, ∂_j ν> = -<∂_ij X, ν>; sinθ = 1 so the frame is the coordinate frame
        let first = [[dot(xt, xt), dot(xt, xp)], [dot(xt, xp), dot(xp, xp)]];
        let second = [[-dot(xtt, nrm), -dot(xtp, nrm)], [-dot(xtp, nrm), -dot(xpp, nrm)]];

        let jet = jet2(1.0, [0.3, 0.0], [[0.0; 2]; 2]);
        let geo = point_geometry(&jet).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((geo.metric.get(i, j) - first[i][j]).abs() < 1e-7, "g{i}{j}");
                assert!((geo.second_ff.get(i, j) - second[i][j]).abs() < 1e-6, "h{i}{j}");
            }
        }
        // principal curvatures from the shape operator of the oracle
        let det1 = first[0][0] * first[1][1] - first[0][1] * first[1][0];
        let kg = (second[0][0] * second[1][1] - second[0][1] * second[1][0]) / det1;
        let hm = (first[0][0] * second[1][1] + first[1][1] * second[0][0]
            - 2.0 * first[0][1] * second[0][1])
            / det1;
        let disc = (hm * hm - 4.0 * kg).max(0.0).sqrt();
        let k_oracle = [(hm - disc) / 2.0, (hm + disc) / 2.0];
        for i in 0..2 {
            assert!((geo.kappa[i] - k_oracle[i]).abs() < 1e-6, "{:?} vs {:?}", geo.kappa, k_oracle);
        }
    }

    #[test]
    fn support_is_position_dot_normal() {
        let jet = PointJet::new(
            0.8,
            &[0.2, -0.4, 0.1],
            SymMatrix::from_fn(3, |i, j| 0.1 * (i + j) as f64 - 0.2),
        )
        .unwrap();
        let geo = point_geometry(&jet).unwrap();
        // X = ρ z, i.e. (ρ, 0, .., 0) in the local basis
        assert!((geo.support - jet.rho * geo.normal[0]).abs() < 1e-15);
    }

    #[test]
    fn kappa_solve_generalized_problem() {
        let jet = PointJet::new(
            1.3,
            &[0.5, -0.2, 0.3],
            SymMatrix::from_fn(3, |i, j| if i == j { -0.4 + 0.3 * i as f64 } else { 0.15 }),
        )
        .unwrap();
        let geo = point_geometry(&jet).unwrap();
        let hn = geo.second_ff.contract(&geo.second_ff).sqrt();
        for &k in &geo.kappa {
            let m = SquareMatrix::from_fn(3, |i, j| geo.second_ff.get(i, j) - k * geo.metric.get(i, j));
            assert!(m.determinant().abs() < 1e-10 * hn.powi(3).max(1.0));
        }
        // σ_k from κ agrees with the Weingarten coefficients
        let s = geo.weingarten.char_coefficients();
        let sk = crate::symfun::sigma_all(&geo.kappa);
        for i in 1..=3 {
            assert!((s[i] - sk[i]).abs() < 1e-12 * (1.0 + s[i].abs()));
        }
    }

    #[test]
    fn rhs_examples() {
        assert_eq!(equation_rhs(&PointJet::constant(2, 1.0), 1.0), 1.0);
        assert_eq!(equation_rhs(&PointJet::constant(2, 2.0), 1.0), 0.25);
    }

    #[test]
    fn residual_on_constant_radius() {
        assert!(residual_point(&PointJet::constant(2, 0.5), 1, 1.0).unwrap().abs() < 1e-14);
        assert!(residual_point(&PointJet::constant(3, 1.0 / 3.0), 2, 1.0).unwrap().abs() < 1e-12);
        assert!(residual_point(&PointJet::constant(3, 1.0), 2, 3.0).unwrap().abs() < 1e-14);
        assert!(residual_point(&PointJet::constant(2, 1.0), 2, 1.0).unwrap().abs() < 1e-14);
        assert!(residual_point(&PointJet::constant(2, 1.0), 3, 1.0).is_err());
    }

    #[test]
    fn nonpositive_radius_rejected() {
        assert!(PointJet::new(0.0, &[0.0, 0.0], SymMatrix::zeros(2)).is_err());
        let bad = PointJet { rho: -1.0, grad: [0.0; 3], hess: SymMatrix::zeros(2) };
        assert!(point_geometry(&bad).is_err());
    }

    #[test]
    fn maximum_point_is_convex() {
        let jet = jet2(1.2, [0.0, 0.0], [[-0.7, 0.2], [0.2, -0.3]]);
        let geo = point_geometry(&jet).unwrap();
        assert!(geo.second_ff.eigenvalues()[0] >= 0.0);
        assert!(geo.kappa[0] > 0.0);
    }

    #[test]
    fn analytic_derivatives_match_differences() {
        let jet = PointJet::new(
            0.9,
            &[0.25, -0.15, 0.05],
            SymMatrix::from_fn(3, |i, j| if i == j { 0.1 - 0.2 * i as f64 } else { 0.07 * (i + j) as f64 }),
        )
        .unwrap();
        let f = 1.7;
        for k in 1..=3 {
            let ev = evaluate(&jet, k, f);
            let e = 1e-6;
            let fd = |mutate: &dyn Fn(&mut PointJet, f64)| {
                let mut a = jet;
                let mut b = jet;
                mutate(&mut a, e);
                mutate(&mut b, -e);
                (evaluate(&a, k, f).residual - evaluate(&b, k, f).residual) / (2.0 * e)
            };
            let d = fd(&|j, s| j.rho += s);
            assert!((d - ev.d_rho).abs() < 1e-7, "k={k} d_rho {d} vs {}", ev.d_rho);
            for a in 0..3 {
                let d = fd(&|j, s| j.grad[a] += s);
                assert!((d - ev.d_grad[a]).abs() < 1e-7, "k={k} d_grad[{a}]");
            }
            for a in 0..3 {
                for b in a..3 {
                    let d = fd(&|j, s| {
                        let v = j.hess.get(a, b) + s;
                        j.hess.set(a, b, v);
                    });
                    let expect = if a == b { ev.d_hess.get(a, b) } else { 2.0 * ev.d_hess.get(a, b) };
                    assert!((d - expect).abs() < 1e-7, "k={k} d_hess[{a}{b}]");
                }
            }
        }
    }
}
