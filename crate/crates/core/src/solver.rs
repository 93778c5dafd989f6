//! Continuity-method solver for `σ_k(κ) = f ρ^{1-n} (ρ² + |∇ρ|²)^{-1/2}`.
//!
//! The family `f_t = [1 − t + t f^{-1/k}]^{-k}` joins `f_0 ≡ 1`, solved by a
//! round sphere, to the target `f_1 = f`. Each accepted `t` is reached by a
//! damped Newton iteration on the discretized equation that keeps every
//! iterate positive and `k`-admissible.

use std::io::Write;
use std::sync::{Arc, OnceLock};

use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::binomial;
use crate::error::{invalid, Error, Result};
use crate::function::{analytic_jet, SphereFunction};
use crate::geometry::{evaluate, PointEval};
use crate::grid::{hess_slot, JetOperator, RadialField, SphereGrid};

/// Tunables of the Newton iteration and the homotopy schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Target for the root-mean-square nodal residual.
    pub newton_tol: f64,
    pub max_newton: usize,
    pub t_step_init: f64,
    pub t_step_min: f64,
    /// Factor applied to `Δt` after a quick Newton solve.
    pub step_grow: f64,
    /// Factor applied to `Δt` after a failed Newton solve.
    pub step_shrink: f64,
    /// Newton solves using at most this many iterations count as quick.
    pub fast_iterations: usize,
    /// Estimate the discretization error at each accepted `t`.
    pub estimate_error: bool,
    /// Estimate the smallest singular value of the Jacobian at each accepted `t`.
    pub singular_values: bool,
    /// After solving at `t = 0`, multiply the field by `1 + a (b·x)` for a
    /// random unit vector `b` drawn from this seed.
    pub restart_perturbation: Option<(f64, u64)>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            newton_tol: 1e-10,
            max_newton: 30,
            t_step_init: 1.0,
            t_step_min: 1e-4,
            step_grow: 1.5,
            step_shrink: 0.5,
            fast_iterations: 3,
            estimate_error: true,
            singular_values: false,
            restart_perturbation: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProblemSpec {
    k: usize,
    grid: Arc<SphereGrid>,
    f: Vec<f64>,
    pub config: SolverConfig,
    /// Fill-reducing analysis of the Jacobian pattern, shared by all solves.
    symbolic: Arc<OnceLock<SymbolicLu<usize>>>,
}

impl ProblemSpec {
    pub fn new(k: usize, grid: Arc<SphereGrid>, f: Vec<f64>, config: SolverConfig) -> Result<Self> {
        let n = grid.dim();
        if k == 0 || k >= n {
            return invalid(format!("order k = {k} must satisfy 1 ≤ k ≤ n − 1 = {}", n - 1));
        }
        if f.len() != grid.len() {
            return invalid(format!("f has {} values for {} nodes", f.len(), grid.len()));
        }
        if let Some(i) = f.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Precondition(format!("f must be positive, got {} at node {i}", f[i])));
        }
        let c = &config;
        if !(c.newton_tol > 0.0) || c.max_newton == 0 {
            return invalid("newton_tol must be positive and max_newton nonzero");
        }
        if !(c.t_step_min > 0.0 && c.t_step_min <= c.t_step_init && c.t_step_init <= 1.0) {
            return invalid("need 0 < t_step_min ≤ t_step_init ≤ 1");
        }
        if !(c.step_grow >= 1.0 && c.step_shrink > 0.0 && c.step_shrink < 1.0) {
            return invalid("need step_grow ≥ 1 and 0 < step_shrink < 1");
        }
        Ok(Self { k, grid, f, config, symbolic: Arc::default() })
    }

    pub fn from_function(
        k: usize,
        grid: Arc<SphereGrid>,
        f: &dyn SphereFunction,
        config: SolverConfig,
    ) -> Result<Self> {
        let values = grid.sample(|x| f.eval(x));
        Self::new(k, grid, values, config)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.grid.dim()
    }

    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.grid
    }

    pub fn f(&self) -> &[f64] {
        &self.f
    }

    /// `f_t` at a node.
    pub fn homotopy_f(&self, t: f64, node: usize) -> f64 {
        homotopy_value(self.f[node], t, self.k)
    }

    /// The bounds `(min f_t / C(n,k))^{1/(n−k)}` and `(max f_t / C(n,k))^{1/(n−k)}`
    /// that pinch the radius of a solution.
    pub fn radius_bounds(&self, t: f64) -> (f64, f64) {
        let (lo, hi) = (0..self.grid.len())
            .map(|i| self.homotopy_f(t, i))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let c = binomial(self.n(), self.k);
        let e = 1.0 / (self.n() - self.k) as f64;
        ((lo / c).powf(e), (hi / c).powf(e))
    }
}

/// `[1 − t + t f^{-1/k}]^{-k}`
pub fn homotopy_value(f: f64, t: f64, k: usize) -> f64 {
    let bracket = 1.0 - t + t * f.powf(-1.0 / k as f64);
    debug_assert!(bracket > 0.0, "homotopy bracket {bracket} for f = {f}, t = {t}");
    bracket.powi(-(k as i32))
}

/// Constant radius `C(n,k)^{-1/(n−k)}` solving the `t = 0` problem.
pub fn initial_radius(n: usize, k: usize) -> f64 {
    binomial(n, k).powf(-1.0 / (n - k) as f64)
}

pub fn initial_sphere(spec: &ProblemSpec) -> RadialField {
    RadialField::constant(spec.grid.clone(), initial_radius(spec.n(), spec.k))
        .expect("positive constant radius")
}

/// Nodal residuals together with the pointwise evaluations behind them.
#[derive(Clone, Debug)]
pub struct Residual {
    pub values: Vec<f64>,
    pub evals: Vec<PointEval>,
    /// Nodes where `κ ∉ Γ_k`.
    pub inadmissible: Vec<usize>,
}

impl Residual {
    /// Root-mean-square over nodes.
    pub fn norm(&self) -> f64 {
        rms(&self.values)
    }

    pub fn min_cone_margin(&self, k: usize) -> f64 {
        self.evals.iter().map(|e| e.cone_margin(k)).fold(f64::INFINITY, f64::min)
    }
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn residual_with(op: &JetOperator, spec: &ProblemSpec, rho: &[f64], t: f64) -> Residual {
    let k = spec.k;
    let evals: Vec<PointEval> = (0..rho.len())
        .into_par_iter()
        .map(|i| evaluate(&op.jet_at(i, rho), k, spec.homotopy_f(t, i)))
        .collect();
    let values = evals.iter().map(|e| e.residual).collect();
    let inadmissible =
        evals.iter().enumerate().filter(|(_, e)| !(e.cone_margin(k) > 0.0)).map(|(i, _)| i).collect();
    Residual { values, evals, inadmissible }
}

/// `σ_k(κ) − f_t ρ^{1−n}(ρ² + |∇ρ|²)^{-1/2}` at every node.
pub fn assemble_residual(spec: &ProblemSpec, rho: &[f64], t: f64) -> Residual {
    residual_with(spec.grid.jet_operator(), spec, rho, t)
}

/// Row-compressed Jacobian sharing the stencil sparsity pattern.
#[derive(Clone, Debug)]
pub struct Jacobian {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Jacobian {
    pub fn dim(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, a)| a * x[j]).sum()
            })
            .collect()
    }

    pub fn factorize(&self) -> Result<LinearSolver> {
        self.factorize_with(&OnceLock::new())
    }

    /// Factorizes, computing the symbolic analysis only if `cache` is empty.
    /// The cached analysis must come from a matrix with the same pattern.
    pub fn factorize_with(&self, cache: &OnceLock<SymbolicLu<usize>>) -> Result<LinearSolver> {
        let n = self.dim();
        let mut trip = Vec::with_capacity(self.nnz());
        for i in 0..n {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                trip.push(Triplet::new(i, j, a));
            }
        }
        let m = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
            .map_err(|e| Error::LinearSolve(format!("{e:?}")))?;
        let sym = match cache.get() {
            Some(sym) => sym.clone(),
            None => {
                let sym = SymbolicLu::try_new(m.symbolic())
                    .map_err(|e| Error::LinearSolve(format!("{e:?}")))?;
                let _ = cache.set(sym.clone());
                sym
            }
        };
        let lu = Lu::try_new_with_symbolic(sym, m.as_ref())
            .map_err(|e| Error::LinearSolve(format!("{e:?}")))?;
        Ok(LinearSolver { lu, n })
    }
}

/// Sparse LU factorization of a Jacobian.
#[derive(Debug)]
pub struct LinearSolver {
    lu: Lu<usize, f64>,
    n: usize,
}

impl LinearSolver {
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.solve_impl(rhs, false)
    }

    pub fn solve_transpose(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.solve_impl(rhs, true)
    }

    fn solve_impl(&self, rhs: &[f64], transpose: bool) -> Result<Vec<f64>> {
        let mut b = Mat::from_fn(self.n, 1, |i, _| rhs[i]);
        if transpose {
            self.lu.solve_transpose_in_place_with_conj(Conj::No, b.as_mut());
        } else {
            self.lu.solve_in_place_with_conj(Conj::No, b.as_mut());
        }
        let x: Vec<f64> = (0..self.n).map(|i| b[(i, 0)]).collect();
        if x.iter().all(|v| v.is_finite()) {
            Ok(x)
        } else {
            Err(Error::LinearSolve("singular Jacobian".into()))
        }
    }
}

fn jacobian_with(op: &JetOperator, residual: &Residual) -> Jacobian {
    let n = op.dim();
    let nodes = residual.evals.len();
    let mut row_ptr = Vec::with_capacity(nodes + 1);
    row_ptr.push(0);
    let mut cols = Vec::with_capacity(op.nnz());
    let mut vals = Vec::with_capacity(op.nnz());
    for i in 0..nodes {
        let e = &residual.evals[i];
        // chain rule coefficients per weight slot; off-diagonal Hessian slots
        // stand for both (a, b) and (b, a)
        let mut coef = [0.0; 9];
        coef[..n].copy_from_slice(&e.d_grad[..n]);
        for a in 0..n {
            for b in a..n {
                let mult = if a == b { 1.0 } else { 2.0 };
                coef[hess_slot(n, a, b)] = mult * e.d_hess.get(a, b);
            }
        }
        let (c, w) = op.row(i);
        for (&j, ws) in c.iter().zip(w) {
            let mut v: f64 = ws.iter().zip(&coef).map(|(a, b)| a * b).sum();
            if j == i {
                v += e.d_rho;
            }
            cols.push(j);
            vals.push(v);
        }
        if !c.contains(&i) {
            cols.push(i);
            vals.push(e.d_rho);
        }
        row_ptr.push(cols.len());
    }
    Jacobian { row_ptr, cols, vals }
}

/// Derivative of [`assemble_residual`] with respect to the nodal radii.
pub fn assemble_jacobian(spec: &ProblemSpec, rho: &[f64], t: f64) -> Result<Jacobian> {
    let r = assemble_residual(spec, rho, t);
    if let Some(&node) = r.inadmissible.first() {
        return Err(Error::Inadmissible {
            node,
            reason: format!("σ_i(κ) ≤ 0 for some i ≤ {} ({} nodes)", spec.k, r.inadmissible.len()),
        });
    }
    Ok(jacobian_with(spec.grid.jet_operator(), &r))
}

/// Radius pinching and gradient bound at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub lower: f64,
    pub upper: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub max_grad: f64,
}

impl BoundReport {
    /// Largest violation of `lower ≤ ρ ≤ upper`, zero when pinched.
    pub fn violation(&self) -> f64 {
        (self.lower - self.rho_min).max(self.rho_max - self.upper).max(0.0)
    }
}

#[derive(Clone, Debug)]
pub struct HomotopyState {
    pub t: f64,
    pub field: RadialField,
    pub residual_norm: f64,
    pub newton_iters: usize,
    /// `min_node min_{i ≤ k} σ_i(κ)`
    pub min_kappa_margin: f64,
    pub bounds: BoundReport,
    pub max_h_over_u: f64,
    pub max_a2: f64,
    /// Max-norm estimate of the difference between the discrete and the
    /// continuous solution.
    pub discretization_error: Option<f64>,
    pub min_singular_value: Option<f64>,
}

/// One Newton iteration in the convergence trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub iteration: usize,
    pub residual_norm: f64,
    /// Damping factor of the step that produced this iterate.
    pub step_length: f64,
    pub min_kappa_margin: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub max_h_over_u: f64,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub field: RadialField,
    pub states: Vec<HomotopyState>,
    pub trace: Vec<TraceRow>,
}

impl Solution {
    pub fn final_state(&self) -> &HomotopyState {
        self.states.last().expect("at least the t = 0 state")
    }
}

fn max_h_over_u(r: &Residual) -> f64 {
    r.evals.iter().map(|e| e.mean_curvature() / e.support).fold(f64::NEG_INFINITY, f64::max)
}

fn trace_row(t: f64, iteration: usize, step: f64, rho: &[f64], r: &Residual, k: usize) -> TraceRow {
    TraceRow {
        t,
        iteration,
        residual_norm: r.norm(),
        step_length: step,
        min_kappa_margin: r.min_cone_margin(k),
        rho_min: rho.iter().copied().fold(f64::INFINITY, f64::min),
        rho_max: rho.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        max_h_over_u: max_h_over_u(r),
    }
}

/// Result of a converged Newton solve.
#[derive(Clone, Debug)]
pub struct NewtonOutcome {
    pub rho: Vec<f64>,
    pub residual: Residual,
    pub iterations: usize,
    /// Factorization from the last Newton step, at the previous iterate.
    pub last_factorization: Option<Arc<LinearSolver>>,
}

/// Damped Newton iteration at fixed `t`, starting from `rho`.
///
/// Trial steps are halved until the iterate is positive, admissible and
/// reduces the residual norm.
pub fn newton_solve(
    spec: &ProblemSpec,
    rho: &[f64],
    t: f64,
    trace: &mut Vec<TraceRow>,
) -> Result<NewtonOutcome> {
    let cfg = &spec.config;
    let op = spec.grid.jet_operator();
    let mut rho = rho.to_vec();
    let mut r = residual_with(op, spec, &rho, t);
    if let Some(&node) = r.inadmissible.first() {
        return Err(Error::Inadmissible { node, reason: "starting iterate leaves Γ_k".into() });
    }
    let mut step = 0.0;
    let mut best = r.norm();
    let mut last_lu = None;
    for it in 0.. {
        let norm = r.norm();
        best = best.min(norm);
        trace.push(trace_row(t, it, step, &rho, &r, spec.k));
        if norm <= cfg.newton_tol {
            return Ok(NewtonOutcome { rho, residual: r, iterations: it, last_factorization: last_lu });
        }
        if it >= cfg.max_newton {
            return Err(Error::NonConvergence { iterations: it, best_residual: best });
        }
        let lu = jacobian_with(op, &r).factorize_with(&spec.symbolic)?;
        let neg: Vec<f64> = r.values.iter().map(|v| -v).collect();
        let delta = lu.solve(&neg)?;
        last_lu = Some(Arc::new(lu));
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = rho.iter().zip(&delta).map(|(a, d)| a + lambda * d).collect();
            if trial.iter().all(|&v| v > 0.0) {
                let rt = residual_with(op, spec, &trial, t);
                let nt = rt.norm();
                if rt.inadmissible.is_empty()
                    && (nt <= (1.0 - 1e-4 * lambda) * norm || nt <= cfg.newton_tol)
                {
                    rho = trial;
                    r = rt;
                    step = lambda;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 2f64.powi(-30) {
                return Err(Error::Stagnation { residual: norm });
            }
        }
    }
    unreachable!()
}

/// Defect-correction estimate `‖J⁻¹ R_hi(ρ_h)‖_∞`, where `R_hi` is the
/// residual with stencils two orders higher.
pub fn discretization_error(
    spec: &ProblemSpec,
    hi: &JetOperator,
    rho: &[f64],
    t: f64,
) -> Result<f64> {
    discretization_error_with(spec, hi, rho, t, None)
}

/// As [`discretization_error`], optionally reusing a factorization of a
/// nearby Jacobian.
fn discretization_error_with(
    spec: &ProblemSpec,
    hi: &JetOperator,
    rho: &[f64],
    t: f64,
    lu: Option<&LinearSolver>,
) -> Result<f64> {
    let fresh;
    let lu = match lu {
        Some(lu) => lu,
        None => {
            let r = assemble_residual(spec, rho, t);
            fresh = jacobian_with(spec.grid.jet_operator(), &r).factorize_with(&spec.symbolic)?;
            &fresh
        }
    };
    let rh = residual_with(hi, spec, rho, t);
    Ok(max_abs(&lu.solve(&rh.values)?))
}

/// Smallest singular value of the Jacobian by inverse iteration on `JᵀJ`.
pub fn min_singular_value(spec: &ProblemSpec, rho: &[f64], t: f64, iterations: usize) -> Result<f64> {
    let r = assemble_residual(spec, rho, t);
    let lu = jacobian_with(spec.grid.jet_operator(), &r).factorize_with(&spec.symbolic)?;
    let n = rho.len();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut growth = 0.0;
    for _ in 0..iterations {
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter_mut().for_each(|v| *v /= nx);
        // (JᵀJ)^{-1} x = J^{-1} J^{-T} x
        let y = lu.solve_transpose(&x)?;
        x = lu.solve(&y)?;
        growth = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    Ok(1.0 / growth.sqrt())
}

fn make_state(
    spec: &ProblemSpec,
    hi: Option<&JetOperator>,
    t: f64,
    out: &NewtonOutcome,
) -> Result<HomotopyState> {
    let (lower, upper) = spec.radius_bounds(t);
    let field = RadialField::new(spec.grid.clone(), out.rho.clone())?;
    let max_grad = (0..out.rho.len())
        .map(|i| spec.grid.jet_operator().jet_at(i, &out.rho).grad_norm_sq().sqrt())
        .fold(0.0, f64::max);
    let discretization_error = match hi {
        Some(op) => Some(discretization_error_with(
            spec,
            op,
            &out.rho,
            t,
            out.last_factorization.as_deref(),
        )?),
        None => None,
    };
    let min_singular_value = if spec.config.singular_values {
        Some(min_singular_value(spec, &out.rho, t, 30)?)
    } else {
        None
    };
    Ok(HomotopyState {
        t,
        bounds: BoundReport { lower, upper, rho_min: field.min(), rho_max: field.max(), max_grad },
        field,
        residual_norm: out.residual.norm(),
        newton_iters: out.iterations,
        min_kappa_margin: out.residual.min_cone_margin(spec.k),
        max_h_over_u: max_h_over_u(&out.residual),
        max_a2: out.residual.evals.iter().map(|e| e.norm_a2).fold(0.0, f64::max),
        discretization_error,
        min_singular_value,
    })
}

/// Multiplies the field by `1 + amplitude·(b·x)` for a random unit `b`.
pub fn perturb(grid: &SphereGrid, rho: &[f64], amplitude: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = grid.dim() + 1;
    let mut b: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    b.iter_mut().for_each(|v| *v /= nb);
    rho.iter()
        .enumerate()
        .map(|(i, r)| {
            let bx: f64 = grid.point(i).iter().zip(&b).map(|(p, q)| p * q).sum();
            r * (1.0 + amplitude * bx)
        })
        .collect()
}

/// Weighted geometric mean of `f_t` over the sphere.
fn geometric_mean_f(spec: &ProblemSpec, t: f64) -> f64 {
    let g = &spec.grid;
    let logs: Vec<f64> = (0..g.len()).map(|i| spec.homotopy_f(t, i).ln()).collect();
    (g.integrate(&logs) / g.sphere_area()).exp()
}

/// Starting guess at `t_next`: the equation is invariant under
/// `ρ → cρ, f → c^{k−n} f`, so the previous solution is rescaled to the
/// change in the mean of `f_t`, unless that makes the residual worse.
fn predict(spec: &ProblemSpec, rho: &[f64], t: f64, t_next: f64) -> Vec<f64> {
    let e = 1.0 / (spec.n() - spec.k) as f64;
    let c = (geometric_mean_f(spec, t_next) / geometric_mean_f(spec, t)).powf(e);
    let scaled: Vec<f64> = rho.iter().map(|r| r * c).collect();
    let rs = assemble_residual(spec, &scaled, t_next);
    let r0 = assemble_residual(spec, rho, t_next);
    let ok = |r: &Residual| r.inadmissible.is_empty();
    if ok(&rs) && (!ok(&r0) || rs.norm() <= r0.norm()) {
        scaled
    } else {
        rho.to_vec()
    }
}

/// Solves at `t = 0`, then advances `t` to 1 with adaptive steps.
pub fn continuity_solve(spec: &ProblemSpec) -> Result<Solution> {
    let cfg = &spec.config;
    let hi = if cfg.estimate_error {
        Some(JetOperator::new(&spec.grid, spec.grid.stencil_order() + 2)?)
    } else {
        None
    };
    let mut trace = Vec::new();
    let mut states = Vec::new();
    let start = newton_solve(spec, initial_sphere(spec).values(), 0.0, &mut trace)?;
    states.push(make_state(spec, hi.as_ref(), 0.0, &start)?);
    let mut rho = start.rho;
    if let Some((amp, seed)) = cfg.restart_perturbation {
        rho = perturb(&spec.grid, &rho, amp, seed);
    }

    let mut t = 0.0;
    let mut dt = cfg.t_step_init;
    while t < 1.0 {
        let t_next = if t + dt >= 1.0 - 1e-12 { 1.0 } else { t + dt };
        let guess = predict(spec, &rho, t, t_next);
        match newton_solve(spec, &guess, t_next, &mut trace) {
            Ok(out) => {
                states.push(make_state(spec, hi.as_ref(), t_next, &out)?);
                if out.iterations <= cfg.fast_iterations {
                    dt = (dt * cfg.step_grow).min(1.0);
                }
                rho = out.rho;
                t = t_next;
            }
            Err(e @ (Error::NonConvergence { .. }
            | Error::Stagnation { .. }
            | Error::Inadmissible { .. }
            | Error::LinearSolve(_))) => {
                dt *= cfg.step_shrink;
                if dt < cfg.t_step_min {
                    return Err(Error::HomotopyFailure {
                        t,
                        cause: e.to_string(),
                        trace: Box::new(states),
                    });
                }
            }
            Err(e) => return Err(e),
        }
    }
    let field = RadialField::new(spec.grid.clone(), rho)?;
    Ok(Solution { field, states, trace })
}

/// `f = σ_k(κ) ρ^{n−1} √(ρ² + |∇ρ|²)` from discrete jets of a field, with
/// the nodes where `κ ∉ Γ_k`.
pub fn forward_density(field: &RadialField, k: usize) -> (Vec<f64>, Vec<usize>) {
    let op = field.grid().jet_operator();
    forward_from_jets(k, (0..field.values().len()).map(|i| op.jet_at(i, field.values())))
}

/// Like [`forward_density`] but with jets of a smooth function computed
/// along great circles, so `f` carries no grid truncation error.
pub fn forward_density_analytic(
    grid: &SphereGrid,
    rho: &dyn SphereFunction,
    k: usize,
) -> (Vec<f64>, Vec<usize>) {
    let n = grid.dim();
    let jets = (0..grid.len()).map(|i| {
        let frame: Vec<&[f64]> = (0..n).map(|a| grid.frame(i, a)).collect();
        analytic_jet(rho, grid.point(i), &frame)
    });
    forward_from_jets(k, jets)
}

/// Density of the radial graph of `rho` at an arbitrary unit vector `x`.
pub fn density_at(rho: &dyn SphereFunction, k: usize, x: &[f64]) -> f64 {
    let frame = tangent_frame(x);
    let refs: Vec<&[f64]> = frame.iter().map(|v| v.as_slice()).collect();
    let jet = analytic_jet(rho, x, &refs);
    let n = jet.dim() as i32;
    evaluate(&jet, k, 0.0).sigmas[k] * jet.rho.powi(n - 1) * jet.w()
}

/// Orthonormal basis of the tangent space at `x` by Gram-Schmidt on the
/// coordinate axes.
fn tangent_frame(x: &[f64]) -> Vec<Vec<f64>> {
    let d = x.len();
    let mut basis: Vec<Vec<f64>> = vec![x.to_vec()];
    let mut axes: Vec<usize> = (0..d).collect();
    axes.sort_by(|&a, &b| x[a].abs().total_cmp(&x[b].abs()));
    for a in axes {
        if basis.len() == d {
            break;
        }
        let mut v = vec![0.0; d];
        v[a] = 1.0;
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(p, q)| p * q).sum();
            v.iter_mut().zip(b).for_each(|(p, q)| *p -= dot * q);
        }
        let norm = v.iter().map(|p| p * p).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|p| *p /= norm);
            basis.push(v);
        }
    }
    basis.split_off(1)
}

fn forward_from_jets(
    k: usize,
    jets: impl Iterator<Item = crate::geometry::PointJet>,
) -> (Vec<f64>, Vec<usize>) {
    let mut f = Vec::new();
    let mut bad = Vec::new();
    for (i, jet) in jets.enumerate() {
        let e = evaluate(&jet, k, 0.0);
        if !(e.cone_margin(k) > 0.0) || !(jet.rho > 0.0) {
            bad.push(i);
        }
        let n = jet.dim() as i32;
        f.push(e.sigmas[k] * jet.rho.powi(n - 1) * jet.w());
    }
    (f, bad)
}

/// Writes the convergence trace as comma-separated text.
pub fn write_trace<W: Write>(out: &mut W, trace: &[TraceRow]) -> Result<()> {
    writeln!(out, "t,iteration,residual_norm,step_length,min_kappa_margin,rho_min,rho_max,max_h_over_u")?;
    for r in trace {
        writeln!(
            out,
            "{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.t,
            r.iteration,
            r.residual_norm,
            r.step_length,
            r.min_kappa_margin,
            r.rho_min,
            r.rho_max,
            r.max_h_over_u
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, k: usize, res: &[usize], f: impl Fn(&[f64]) -> f64 + Send + Sync) -> ProblemSpec {
        let grid = Arc::new(SphereGrid::with_default_order(n, res).unwrap());
        ProblemSpec::from_function(k, grid, &f, SolverConfig::default()).unwrap()
    }

    #[test]
    fn homotopy_values() {
        assert_eq!(homotopy_value(7.0, 0.0, 2), 1.0);
        assert!((homotopy_value(7.0, 1.0, 2) - 7.0).abs() < 1e-12);
        assert!((homotopy_value(16.0, 0.5, 2) - 2.56).abs() < 1e-12);
    }

    #[test]
    fn initial_radii() {
        assert!((initial_radius(2, 1) - 0.5).abs() < 1e-15);
        assert!((initial_radius(3, 2) - 1.0 / 3.0).abs() < 1e-15);
        assert!((initial_radius(3, 1) - 3f64.powf(-0.5)).abs() < 1e-15);
        for (n, k, res) in [(2, 1, vec![8, 16]), (3, 1, vec![8, 8, 16]), (3, 2, vec![8, 8, 16])] {
            let s = spec(n, k, &res, |_| 1.0);
            let r = assemble_residual(&s, initial_sphere(&s).values(), 0.0);
            assert!(max_abs(&r.values) < 1e-12, "({n},{k})");
            assert!(r.inadmissible.is_empty());
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let g = Arc::new(SphereGrid::with_default_order(2, &[8, 16]).unwrap());
        let c = SolverConfig::default();
        assert!(ProblemSpec::new(2, g.clone(), vec![1.0; g.len()], c.clone()).is_err());
        assert!(ProblemSpec::new(0, g.clone(), vec![1.0; g.len()], c.clone()).is_err());
        let mut f = vec![1.0; g.len()];
        f[5] = -1.0;
        assert!(matches!(ProblemSpec::new(1, g.clone(), f, c.clone()), Err(Error::Precondition(_))));
        let bad = SolverConfig { t_step_min: 2.0, ..c };
        assert!(ProblemSpec::new(1, g.clone(), vec![1.0; g.len()], bad).is_err());
    }

    /// A degree-one harmonic perturbation translates the sphere to first
    /// order: curvature is unchanged and the right side drops by `n ρ₀^{-n} δ`.
    #[test]
    fn perturbed_sphere_residual_matches_linearization() {
        let s = spec(2, 1, &[16, 32], |_| 1.0);
        let r0 = initial_radius(2, 1);
        let eps = 1e-4;
        let rho = s.grid.sample(|x| r0 * (1.0 + eps * x[0]));
        let r = assemble_residual(&s, &rho, 0.0);
        for i in 0..s.grid.len() {
            let lin = 2.0 * r0.powi(-2) * eps * s.grid.point(i)[0];
            assert!((r.values[i] - lin).abs() < 1e-6, "{} vs {lin}", r.values[i]);
        }
    }

    fn fd_check(s: &ProblemSpec, rho: &[f64], t: f64, seed: u64) {
        let j = assemble_jacobian(s, rho, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            let d: Vec<f64> = (0..rho.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = 1e-6;
            let plus: Vec<f64> = rho.iter().zip(&d).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = rho.iter().zip(&d).map(|(a, b)| a - h * b).collect();
            let rp = assemble_residual(s, &plus, t).values;
            let rm = assemble_residual(s, &minus, t).values;
            let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let jd = j.matvec(&d);
            let diff: Vec<f64> = fd.iter().zip(&jd).map(|(a, b)| a - b).collect();
            assert!(max_abs(&diff) <= 1e-5 * max_abs(&jd), "{} vs {}", max_abs(&diff), max_abs(&jd));
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let s = spec(2, 1, &[12, 24], |x| 1.0 + 0.2 * x[1]);
        let rho = s.grid.sample(|x| 0.5 + 0.05 * x[0] + 0.03 * x[1] * x[2]);
        fd_check(&s, &rho, 0.7, 1);
        let s = spec(3, 2, &[8, 8, 16], |x| 1.0 + 0.2 * x[3]);
        let rho = s.grid.sample(|x| 0.34 + 0.02 * x[0] * x[3] + 0.02 * x[2]);
        fd_check(&s, &rho, 0.4, 2);
    }

    /// At the round sphere the `k = 1` operator acts on constants by
    /// differentiating `n/ρ − ρ^{-n}` in `ρ`.
    #[test]
    fn jacobian_on_constants_at_sphere() {
        let s = spec(2, 1, &[16, 32], |_| 1.0);
        let r0 = initial_radius(2, 1);
        let j = assemble_jacobian(&s, initial_sphere(&s).values(), 0.0).unwrap();
        let out = j.matvec(&vec![1.0; s.grid.len()]);
        let want = -2.0 / (r0 * r0) + 2.0 * r0.powi(-3);
        for v in out {
            assert!((v - want).abs() < 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn exact_start_takes_no_iterations() {
        let s = spec(2, 1, &[8, 16], |_| 1.0);
        let mut trace = vec![];
        let out = newton_solve(&s, initial_sphere(&s).values(), 0.0, &mut trace).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.rho, initial_sphere(&s).values());
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn newton_converges_quadratically() {
        let s = spec(2, 1, &[16, 32], |x| 1.0 + 0.1 * x[0]);
        let rho = s.grid.sample(|x| 0.5 * (1.0 + 1e-3 * (x[1] + x[0] * x[2])));
        let mut trace = vec![];
        let cfg_tol = SolverConfig { newton_tol: 1e-12, ..SolverConfig::default() };
        let s = ProblemSpec::new(1, s.grid.clone(), s.f.clone(), cfg_tol).unwrap();
        newton_solve(&s, &rho, 1.0, &mut trace).unwrap();
        let r: Vec<f64> = trace.iter().map(|t| t.residual_norm).collect();
        assert!(r.len() >= 3, "{r:?}");
        // the last ratio above the round-off floor
        let i = (1..r.len() - 1).rev().find(|&i| r[i + 1] > 1e-14).unwrap_or(1);
        let p = r[i + 1].ln() / r[i].ln();
        assert!(p > 1.5, "orders {r:?}");
    }

    #[test]
    fn constant_f_gives_constant_solution() {
        let s = spec(2, 1, &[16, 32], |_| 3.0);
        let sol = continuity_solve(&s).unwrap();
        let want = 1.5;
        assert!(sol.field.values().iter().all(|v| (v - want).abs() < 1e-9));
        assert_eq!(sol.states.len(), 2);
        assert!(sol.final_state().bounds.violation() < 1e-9);
    }

    #[test]
    fn jacobian_pattern_is_symmetric() {
        let s = spec(2, 1, &[8, 16], |_| 1.0);
        let j = assemble_jacobian(&s, initial_sphere(&s).values(), 0.0).unwrap();
        for i in 0..j.dim() {
            for &c in j.row(i).0 {
                assert!(j.row(c).0.contains(&i));
            }
        }
    }

    #[test]
    fn forward_of_unit_sphere() {
        let g = Arc::new(SphereGrid::with_default_order(3, &[8, 8, 16]).unwrap());
        let field = RadialField::constant(g, 1.0).unwrap();
        let (f, bad) = forward_density(&field, 2);
        assert!(bad.is_empty());
        assert!(f.iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn singular_value_at_sphere_is_positive() {
        let s = spec(2, 1, &[8, 16], |_| 1.0);
        let sv = min_singular_value(&s, initial_sphere(&s).values(), 0.0, 20).unwrap();
        assert!(sv > 1.0, "{sv}");
    }
}
