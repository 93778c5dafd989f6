//! Elementary symmetric functions of vectors and small symmetric matrices.
//!
//! Matrices here are at most 3×3. `σ_k` of a matrix is taken to mean `σ_k` of
//! its eigenvalues, which equals the sum of its principal `k×k` minors, so
//! no eigen-solver is needed on the hot path.
//!
//! Derivatives follow the convention of treating every entry `A_ij` as an
//! independent variable: `sigma_grad` returns `∂σ_k/∂A_ij` and
//! `sigma_hess_quadform` returns `Σ ∂²σ_k/∂A_ij∂A_lm B_ij B_lm`.

use crate::error::{invalid, Error, Result};

pub mod sampling;

/// Largest supported matrix dimension.
pub const MAX_DIM: usize = 3;

/// Dense `n×n` matrix with `n ≤ 3`, not necessarily symmetric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    a: [[f64; MAX_DIM]; MAX_DIM],
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&n), "dimension {n} unsupported");
        Self { n, a: [[0.0; MAX_DIM]; MAX_DIM] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.a[i][i] = 1.0;
        }
        m
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.a[i][j] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i][j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i][j] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.a[i][i]).sum()
    }

    pub fn mul(&self, other: &SquareMatrix) -> SquareMatrix {
        debug_assert_eq!(self.n, other.n);
        SquareMatrix::from_fn(self.n, |i, j| (0..self.n).map(|l| self.a[i][l] * other.a[l][j]).sum())
    }

    pub fn transpose(&self) -> SquareMatrix {
        SquareMatrix::from_fn(self.n, |i, j| self.a[j][i])
    }

    pub fn scale(&self, s: f64) -> SquareMatrix {
        SquareMatrix::from_fn(self.n, |i, j| s * self.a[i][j])
    }

    pub fn add(&self, other: &SquareMatrix) -> SquareMatrix {
        SquareMatrix::from_fn(self.n, |i, j| self.a[i][j] + other.a[i][j])
    }

    /// `Σ_ij self_ij other_ij`
    pub fn contract(&self, other: &SquareMatrix) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                s += self.a[i][j] * other.a[i][j];
            }
        }
        s
    }

    pub fn determinant(&self) -> f64 {
        let a = &self.a;
        match self.n {
            1 => a[0][0],
            2 => a[0][0] * a[1][1] - a[0][1] * a[1][0],
            _ => {
                a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                    - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                    + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
            }
        }
    }

    /// Characteristic-polynomial coefficients `σ_0..σ_n` (sums of principal minors).
    pub fn char_coefficients(&self) -> [f64; MAX_DIM + 1] {
        let a = &self.a;
        let mut s = [0.0; MAX_DIM + 1];
        s[0] = 1.0;
        s[1] = self.trace();
        match self.n {
            1 => {}
            2 => s[2] = self.determinant(),
            _ => {
                s[2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0])
                    + (a[0][0] * a[2][2] - a[0][2] * a[2][0])
                    + (a[1][1] * a[2][2] - a[1][2] * a[2][1]);
                s[3] = self.determinant();
            }
        }
        s
    }

    /// Newton tensor `T_r = Σ_{i=0}^{r} (-1)^i σ_{r-i} A^i`; `∂σ_{r+1}/∂A_ij = (T_r)_ji`.
    pub fn newton_tensor(&self, r: usize) -> SquareMatrix {
        let sig = self.char_coefficients();
        let mut t = SquareMatrix::identity(self.n);
        for j in 1..=r {
            // T_j = σ_j I - A T_{j-1}
            let at = self.mul(&t);
            t = SquareMatrix::identity(self.n).scale(sig[j]).add(&at.scale(-1.0));
        }
        t
    }

    pub fn inverse(&self) -> Option<SquareMatrix> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let a = &self.a;
        let inv = match self.n {
            1 => SquareMatrix::from_fn(1, |_, _| 1.0 / a[0][0]),
            2 => SquareMatrix::from_fn(2, |i, j| {
                let adj = [[a[1][1], -a[0][1]], [-a[1][0], a[0][0]]];
                adj[i][j] / det
            }),
            _ => SquareMatrix::from_fn(3, |i, j| {
                // cofactor of (j, i)
                let r: Vec<usize> = (0..3).filter(|&x| x != j).collect();
                let c: Vec<usize> = (0..3).filter(|&x| x != i).collect();
                let minor = a[r[0]][c[0]] * a[r[1]][c[1]] - a[r[0]][c[1]] * a[r[1]][c[0]];
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                sign * minor / det
            }),
        };
        Some(inv)
    }
}

/// Symmetric `n×n` matrix, `n ∈ {1, 2, 3}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymMatrix(SquareMatrix);

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self(SquareMatrix::zeros(n))
    }

    pub fn identity(n: usize) -> Self {
        Self(SquareMatrix::identity(n))
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = SquareMatrix::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            m.set(i, i, v);
        }
        Self(m)
    }

    /// Builds from the upper triangle of `f`.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        Self(m)
    }

    /// Rejects matrices that are not exactly symmetric.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if !(1..=MAX_DIM).contains(&n) || rows.iter().any(|r| r.len() != n) {
            return invalid(format!("expected a square matrix of size 1..=3, got {n} rows"));
        }
        for i in 0..n {
            for j in 0..i {
                if rows[i][j] != rows[j][i] {
                    return invalid(format!("matrix not symmetric at ({i},{j})"));
                }
            }
        }
        Ok(Self::from_fn(n, |i, j| rows[i][j]))
    }

    /// Symmetrizes a square matrix, `(M + Mᵀ)/2`.
    pub fn symmetrize(m: &SquareMatrix) -> Self {
        Self::from_fn(m.dim(), |i, j| 0.5 * (m.get(i, j) + m.get(j, i)))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    /// Sets both `(i, j)` and `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.0.set(i, j, v);
        self.0.set(j, i, v);
    }

    pub fn as_square(&self) -> &SquareMatrix {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0.scale(s))
    }

    pub fn add(&self, other: &SymMatrix) -> Self {
        Self(self.0.add(&other.0))
    }

    pub fn contract(&self, other: &SymMatrix) -> f64 {
        self.0.contract(&other.0)
    }

    /// `Qᵀ A Q`
    pub fn conjugate(&self, q: &SquareMatrix) -> Self {
        Self::symmetrize(&q.transpose().mul(&self.0).mul(q))
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let n = self.dim();
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| self.get(i, j));
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }
}

fn check_order(k: usize, n: usize) -> Result<()> {
    if k > n {
        return invalid(format!("order k = {k} exceeds dimension n = {n}"));
    }
    Ok(())
}

/// `σ_k(λ)`, by incremental expansion of `Π(1 + λ_i x)`.
pub fn sigma(k: usize, lambda: &[f64]) -> Result<f64> {
    check_order(k, lambda.len())?;
    Ok(sigma_all(lambda)[k])
}

/// All of `σ_0..σ_n`.
pub fn sigma_all(lambda: &[f64]) -> Vec<f64> {
    let n = lambda.len();
    let mut e = vec![0.0; n + 1];
    e[0] = 1.0;
    for (i, &x) in lambda.iter().enumerate() {
        for j in (1..=i + 1).rev() {
            e[j] += x * e[j - 1];
        }
    }
    e
}

/// `σ_k` of the eigenvalues of `a`, via characteristic-polynomial coefficients.
pub fn sigma_matrix(k: usize, a: &SymMatrix) -> Result<f64> {
    check_order(k, a.dim())?;
    Ok(a.as_square().char_coefficients()[k])
}

/// `(σ_k)^{ij} = ∂σ_k/∂A_ij`.
pub fn sigma_grad(k: usize, a: &SymMatrix) -> Result<SymMatrix> {
    check_order(k, a.dim())?;
    if k == 0 {
        return Ok(SymMatrix::zeros(a.dim()));
    }
    Ok(SymMatrix::symmetrize(&a.as_square().newton_tensor(k - 1)))
}

/// `σ_k^{ij,lm} B_ij B_lm`, the second derivative of `ε ↦ σ_k(A + εB)` at zero.
pub fn sigma_hess_quadform(k: usize, a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    let n = a.dim();
    if b.dim() != n {
        return invalid("dimension mismatch between A and B");
    }
    check_order(k, n)?;
    let tr_b = b.trace();
    let b2 = b.as_square().mul(b.as_square());
    let q = match k {
        0 | 1 => 0.0,
        2 => tr_b * tr_b - b2.trace(),
        3 => {
            let tr_a = a.trace();
            let tr_ab = a.contract(b);
            let tr_ab2 = a.as_square().contract(&b2);
            tr_a * tr_b * tr_b - 2.0 * tr_b * tr_ab - tr_a * b2.trace() + 2.0 * tr_ab2
        }
        _ => unreachable!("k ≤ n ≤ 3"),
    };
    Ok(q)
}

/// Membership of `λ` in the Gårding cones `Γ_1..Γ_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConeReport {
    pub lambda: Vec<f64>,
    /// `sigmas[i]` holds `σ_{i+1}(λ)`.
    pub sigmas: Vec<f64>,
    /// `in_gamma[i]` is true iff `λ ∈ Γ_{i+1}`.
    pub in_gamma: Vec<bool>,
    pub k: usize,
}

impl ConeReport {
    /// Whether `λ ∈ Γ_k` for the requested order.
    pub fn admissible(&self) -> bool {
        self.k == 0 || self.in_gamma[self.k - 1]
    }

    pub fn in_gamma_k(&self, k: usize) -> bool {
        k == 0 || self.in_gamma[k - 1]
    }
}

pub fn gamma_k_test(k: usize, lambda: &[f64]) -> Result<ConeReport> {
    check_order(k, lambda.len())?;
    let all = sigma_all(lambda);
    Ok(cone_report_from_sigmas(k, lambda.to_vec(), &all[1..]))
}

fn cone_report_from_sigmas(k: usize, lambda: Vec<f64>, sigmas: &[f64]) -> ConeReport {
    let mut in_gamma = Vec::with_capacity(sigmas.len());
    let mut inside = true;
    for &s in sigmas {
        inside = inside && s > 0.0;
        in_gamma.push(inside);
    }
    ConeReport { lambda, sigmas: sigmas.to_vec(), in_gamma, k }
}

/// Whether the eigenvalues of `a` lie in `Γ_k`, decided from its
/// characteristic coefficients.
pub fn matrix_in_gamma_k(k: usize, a: &SquareMatrix) -> bool {
    let s = a.char_coefficients();
    (1..=k).all(|i| s[i] > 0.0)
}

/// Both sides of the key concavity inequality for one differentiation direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConcavityTerms {
    /// `σ_k^{ij,lm} B_ij B_lm`
    pub lhs: f64,
    /// `-σ_k [a - b][(α-1)a - (α+1)b]` with `a = (σ_k)_s/σ_k`, `b = (σ_1)_s/σ_1`.
    pub rhs: f64,
    /// `(σ_k)_s = σ_k^{ij} B_ij`
    pub dsigma_k: f64,
    /// `(σ_1)_s = tr B`
    pub dsigma_1: f64,
    pub sigma_k: f64,
    pub sigma_1: f64,
}

impl ConcavityTerms {
    pub fn gap(&self) -> f64 {
        self.rhs - self.lhs
    }
}

fn require_gamma_k(k: usize, a: &SymMatrix) -> Result<()> {
    if k < 2 || k > a.dim() {
        return invalid(format!("the concavity inequality needs 2 ≤ k ≤ n, got k = {k}, n = {}", a.dim()));
    }
    if !matrix_in_gamma_k(k, a.as_square()) {
        return Err(Error::Precondition(format!("A is not in Γ_{k}")));
    }
    Ok(())
}

pub fn concavity_terms(k: usize, a: &SymMatrix, b: &SymMatrix) -> Result<ConcavityTerms> {
    require_gamma_k(k, a)?;
    let alpha = 1.0 / (k as f64 - 1.0);
    let sk = sigma_matrix(k, a)?;
    let s1 = a.trace();
    let dk = sigma_grad(k, a)?.contract(b);
    let d1 = b.trace();
    let ra = dk / sk;
    let rb = d1 / s1;
    let rhs = -sk * (ra - rb) * ((alpha - 1.0) * ra - (alpha + 1.0) * rb);
    let lhs = sigma_hess_quadform(k, a, b)?;
    Ok(ConcavityTerms { lhs, rhs, dsigma_k: dk, dsigma_1: d1, sigma_k: sk, sigma_1: s1 })
}

/// Right side minus left side of the key concavity inequality; nonnegative on `Γ_k`.
pub fn concavity_gap(k: usize, a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    Ok(concavity_terms(k, a, b)?.gap())
}

/// Slack in the quadratic bound
/// `σ_k^{ij,lm} B_ij B_lm ≤ max{2r(σ_k)_s − k/(k−1) r² σ_k, 0}`,
/// valid when `(σ_1)_s/σ_1 = (σ_k)_s/σ_k − r`.
pub fn quadratic_bound_slack(k: usize, a: &SymMatrix, b: &SymMatrix, r: f64) -> Result<f64> {
    let t = concavity_terms(k, a, b)?;
    let ra = t.dsigma_k / t.sigma_k;
    let rb = t.dsigma_1 / t.sigma_1;
    let mismatch = (rb - (ra - r)).abs();
    if mismatch > 1e-10 * (1.0 + ra.abs() + rb.abs() + r.abs()) {
        return Err(Error::Precondition(format!(
            "(σ_1)_s/σ_1 = (σ_k)_s/σ_k - r violated by {mismatch:.3e}"
        )));
    }
    let kf = k as f64;
    let bound = (2.0 * r * t.dsigma_k - kf / (kf - 1.0) * r * r * t.sigma_k).max(0.0);
    Ok(bound - t.lhs)
}
