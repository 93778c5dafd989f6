//! Tensor-product angular grids on `S^2` and `S^3`.
//!
//! Coordinates, with the first Cartesian axis as the polar axis:
//!
//! * `n = 2`: `x = (cos θ, sin θ cos φ, sin θ sin φ)`
//! * `n = 3`: `x = (cos θ₁, sin θ₁ cos θ₂, sin θ₁ sin θ₂ cos φ, sin θ₁ sin θ₂ sin φ)`
//!
//! Polar angles sit at half steps, `θ_i = (i + ½) π / N`, so no node lies on a
//! coordinate pole; the azimuth is periodic. Difference stencils reach across
//! the poles through the identifications `(−θ, φ) ~ (θ, φ + π)` (and
//! `(−θ₁, θ₂, φ) ~ (θ₁, π − θ₂, φ + π)` on `S^3`), which requires an even
//! azimuthal count.
//!
//! One-dimensional stencils are trigonometrically fitted: exact on
//! trigonometric polynomials of the stencil's half-width in degree, which
//! keeps the `1/sin θ` factors of the covariant derivatives bounded near
//! the poles. First derivatives along polar axes use two more orders than
//! the nominal stencil order for the same reason.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::geometry::PointJet;
use crate::symfun::{SymMatrix, MAX_DIM};

/// Number of weight slots per stencil entry: `n` gradient + `n(n+1)/2` Hessian.
const SLOTS: usize = MAX_DIM + MAX_DIM * (MAX_DIM + 1) / 2;

#[derive(Debug)]
pub struct SphereGrid {
    n: usize,
    resolution: Vec<usize>,
    stencil_order: usize,
    steps: Vec<f64>,
    /// Angle coordinates per node.
    angles: Vec<[f64; MAX_DIM]>,
    points: Vec<[f64; MAX_DIM + 1]>,
    frames: Vec<[[f64; MAX_DIM + 1]; MAX_DIM]>,
    weights: Vec<f64>,
    jet_op: JetOperator,
}

impl SphereGrid {
    /// `resolution` lists node counts per angle, polar angles first and the
    /// azimuth last. The azimuthal count must be even.
    pub fn new(n: usize, resolution: &[usize], stencil_order: usize) -> Result<Self> {
        if n != 2 && n != 3 {
            return invalid(format!("unsupported sphere dimension {n}"));
        }
        if resolution.len() != n {
            return invalid(format!("S^{n} needs {n} node counts, got {}", resolution.len()));
        }
        if let Some(&r) = resolution.iter().find(|&&r| r < 8) {
            return invalid(format!("resolution {r} below the minimum of 8 per angle"));
        }
        if resolution[n - 1] % 2 != 0 {
            return invalid("azimuthal node count must be even for cross-pole stencils");
        }
        if stencil_order < 2 || stencil_order % 2 != 0 || stencil_order > 8 {
            return invalid(format!("stencil order must be 2, 4, 6 or 8, got {stencil_order}"));
        }
        let mut steps: Vec<f64> = resolution[..n - 1].iter().map(|&r| PI / r as f64).collect();
        steps.push(2.0 * PI / resolution[n - 1] as f64);

        let total: usize = resolution.iter().product();
        let mut angles = Vec::with_capacity(total);
        let mut points = Vec::with_capacity(total);
        let mut frames = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        let polar_w: Vec<Vec<f64>> =
            (0..n - 1).map(|a| polar_weights(resolution[a], n - 1 - a)).collect();
        let dphi = steps[n - 1];
        for idx in 0..total {
            let m = unflatten(resolution, idx);
            let mut ang = [0.0; MAX_DIM];
            for a in 0..n - 1 {
                ang[a] = (m[a] as f64 + 0.5) * steps[a];
            }
            ang[n - 1] = m[n - 1] as f64 * dphi;
            let (p, f) = embed(n, &ang);
            let mut w = dphi;
            for a in 0..n - 1 {
                w *= polar_w[a][m[a]];
            }
            angles.push(ang);
            points.push(p);
            frames.push(f);
            weights.push(w);
        }
        let mut grid = Self {
            n,
            resolution: resolution.to_vec(),
            stencil_order,
            steps,
            angles,
            points,
            frames,
            weights,
            jet_op: JetOperator::empty(n),
        };
        grid.jet_op = JetOperator::new(&grid, stencil_order)?;
        Ok(grid)
    }

    /// Default stencil order: 4 on `S^2`, 2 on `S^3`.
    pub fn with_default_order(n: usize, resolution: &[usize]) -> Result<Self> {
        Self::new(n, resolution, if n == 2 { 4 } else { 2 })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn stencil_order(&self) -> usize {
        self.stencil_order
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn angles(&self, node: usize) -> &[f64] {
        &self.angles[node][..self.n]
    }

    /// Unit vector of `node` in `R^{n+1}`.
    pub fn point(&self, node: usize) -> &[f64] {
        &self.points[node][..self.n + 1]
    }

    /// Orthonormal tangent frame `(e_1, .., e_n)` at `node`.
    pub fn frame(&self, node: usize, a: usize) -> &[f64] {
        &self.frames[node][a][..self.n + 1]
    }

    /// Largest angular step, used as the mesh size `h`.
    pub fn mesh_size(&self) -> f64 {
        self.steps.iter().copied().fold(0.0, f64::max)
    }

    /// Surface area of the unit sphere `S^n`.
    pub fn sphere_area(&self) -> f64 {
        sphere_area(self.n)
    }

    pub fn jet_operator(&self) -> &JetOperator {
        &self.jet_op
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.len());
        compensated_sum(self.weights.iter().zip(values).map(|(w, v)| w * v))
    }

    pub fn integrate_cells(&self, partition: &BorelPartition, values: &[f64]) -> Vec<f64> {
        assert_eq!(values.len(), self.len());
        assert_eq!(partition.cell_of.len(), self.len());
        let mut terms = vec![Vec::new(); partition.cell_count()];
        for ((w, v), &c) in self.weights.iter().zip(values).zip(&partition.cell_of) {
            terms[c].push(w * v);
        }
        terms.into_iter().map(compensated_sum).collect()
    }

    /// Jets of the field in each node's orthonormal frame.
    pub fn jets(&self, field: &RadialField) -> Vec<PointJet> {
        self.jet_op.jets(field.values())
    }

    /// Evaluates `f` at every node.
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.len()).map(|i| f(self.point(i))).collect()
    }

    /// Node index for a (possibly out-of-range) multi-index, following the
    /// cross-pole identifications.
    pub fn wrap(&self, m: [i64; MAX_DIM]) -> usize {
        let n = self.n;
        let r: Vec<i64> = self.resolution.iter().map(|&x| x as i64).collect();
        let half = r[n - 1] / 2;
        let mut m = m;
        // the first polar angle
        if m[0] < 0 || m[0] >= r[0] {
            m[0] = if m[0] < 0 { -1 - m[0] } else { 2 * r[0] - 1 - m[0] };
            if n == 3 {
                m[1] = r[1] - 1 - m[1];
            }
            m[n - 1] += half;
        }
        if n == 3 && (m[1] < 0 || m[1] >= r[1]) {
            m[1] = if m[1] < 0 { -1 - m[1] } else { 2 * r[1] - 1 - m[1] };
            m[2] += half;
        }
        m[n - 1] = m[n - 1].rem_euclid(r[n - 1]);
        let mut idx = 0usize;
        for a in 0..n {
            debug_assert!(m[a] >= 0 && m[a] < r[a]);
            idx = idx * self.resolution[a] + m[a] as usize;
        }
        idx
    }

    pub fn multi_index(&self, node: usize) -> [usize; MAX_DIM] {
        unflatten(&self.resolution, node)
    }

    /// All nodes differing by at most one step in each index.
    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        let m = self.multi_index(node);
        let mut out = Vec::with_capacity(26);
        let range = |a: usize| if a < self.n { -1i64..=1 } else { 0i64..=0 };
        for d0 in range(0) {
            for d1 in range(1) {
                for d2 in range(2) {
                    if d0 == 0 && d1 == 0 && d2 == 0 {
                        continue;
                    }
                    let v = self.wrap([m[0] as i64 + d0, m[1] as i64 + d1, m[2] as i64 + d2]);
                    if v != node && !out.contains(&v) {
                        out.push(v);
                    }
                }
            }
        }
        out
    }

    /// Node whose direction is closest to the unit vector `z`.
    pub fn nearest_node(&self, z: &[f64]) -> usize {
        let n = self.n;
        let mut ang = [0.0; MAX_DIM];
        ang[0] = z[0].clamp(-1.0, 1.0).acos();
        if n == 2 {
            ang[1] = z[2].atan2(z[1]);
        } else {
            let r = (z[1] * z[1] + z[2] * z[2] + z[3] * z[3]).sqrt();
            ang[1] = if r > 0.0 { (z[1] / r).clamp(-1.0, 1.0).acos() } else { 0.0 };
            ang[2] = z[3].atan2(z[2]);
        }
        let mut m = [0i64; MAX_DIM];
        for a in 0..n - 1 {
            let i = (ang[a] / self.steps[a]).floor() as i64;
            m[a] = i.clamp(0, self.resolution[a] as i64 - 1);
        }
        m[n - 1] = (ang[n - 1] / self.steps[n - 1]).round() as i64;
        let mut best = self.wrap(m);
        let dot = |i: usize| self.point(i).iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
        let mut best_dot = dot(best);
        loop {
            let mut improved = false;
            for v in self.neighbors(best) {
                let d = dot(v);
                if d > best_dot {
                    best = v;
                    best_dot = d;
                    improved = true;
                }
            }
            if !improved {
                return best;
            }
        }
    }
}

/// Neumaier-compensated summation.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

pub fn sphere_area(n: usize) -> f64 {
    match n {
        1 => 2.0 * PI,
        2 => 4.0 * PI,
        3 => 2.0 * PI * PI,
        _ => 2.0 * PI.powf((n as f64 + 1.0) / 2.0) / gamma_half(n + 1),
    }
}

/// `Γ(m/2)`
fn gamma_half(m: usize) -> f64 {
    if m == 1 {
        return PI.sqrt();
    }
    if m == 2 {
        return 1.0;
    }
    (m as f64 / 2.0 - 1.0) * gamma_half(m - 2)
}

fn unflatten(res: &[usize], mut idx: usize) -> [usize; MAX_DIM] {
    let mut m = [0usize; MAX_DIM];
    for a in (0..res.len()).rev() {
        m[a] = idx % res[a];
        idx /= res[a];
    }
    m
}

type Embedding = ([f64; MAX_DIM + 1], [[f64; MAX_DIM + 1]; MAX_DIM]);

fn embed(n: usize, ang: &[f64; MAX_DIM]) -> Embedding {
    let mut p = [0.0; MAX_DIM + 1];
    let mut f = [[0.0; MAX_DIM + 1]; MAX_DIM];
    if n == 2 {
        let (s, c) = ang[0].sin_cos();
        let (sp, cp) = ang[1].sin_cos();
        p[..3].copy_from_slice(&[c, s * cp, s * sp]);
        f[0][..3].copy_from_slice(&[-s, c * cp, c * sp]);
        f[1][..3].copy_from_slice(&[0.0, -sp, cp]);
    } else {
        let (s1, c1) = ang[0].sin_cos();
        let (s2, c2) = ang[1].sin_cos();
        let (sp, cp) = ang[2].sin_cos();
        p = [c1, s1 * c2, s1 * s2 * cp, s1 * s2 * sp];
        f[0] = [-s1, c1 * c2, c1 * s2 * cp, c1 * s2 * sp];
        f[1] = [0.0, -s2, c2 * cp, c2 * sp];
        f[2] = [0.0, 0.0, -sp, cp];
    }
    (p, f)
}

/// Interpolatory weights on midpoint nodes for `∫_0^π F(θ) sin^p θ dθ`:
/// `F` is expanded in `cos(mθ)`, `m < N`, and each term integrated exactly.
/// For `p = 1` this is Fejér's first rule.
pub(crate) fn polar_weights(count: usize, power: usize) -> Vec<f64> {
    let moment = |m: usize| -> f64 {
        match power {
            0 => {
                if m == 0 {
                    PI
                } else {
                    0.0
                }
            }
            1 => {
                if m % 2 == 0 {
                    2.0 / (1.0 - (m * m) as f64)
                } else {
                    0.0
                }
            }
            2 => match m {
                0 => PI / 2.0,
                2 => -PI / 4.0,
                _ => 0.0,
            },
            _ => unreachable!("S^n with n ≤ 3"),
        }
    };
    let nf = count as f64;
    (0..count)
        .map(|i| {
            let th = (i as f64 + 0.5) * PI / nf;
            let mut w = moment(0) / nf;
            for m in 1..count {
                let mm = moment(m);
                if mm != 0.0 {
                    w += 2.0 / nf * (m as f64 * th).cos() * mm;
                }
            }
            w
        })
        .collect()
}

fn solve_small(a: Vec<Vec<f64>>, b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[i][j]);
    let rhs = nalgebra::DVector::from_vec(b);
    let x = m.lu().solve(&rhs).expect("stencil system is nonsingular");
    x.iter().copied().collect()
}

/// Antisymmetric first-derivative weights `c_1..c_w`:
/// `f'(0) ≈ Σ_j c_j (f(jh) − f(−jh))`, exact on `sin(mx)`, `m ≤ w`.
pub fn fitted_first_derivative(half_width: usize, h: f64) -> Vec<f64> {
    let w = half_width;
    // exactness on sin(x)·(1 − cos x)^r, r < w, scaled to t_j = (1 − cos jh)/h²
    let t: Vec<f64> = (1..=w).map(|j| 2.0 * (0.5 * j as f64 * h).sin().powi(2) / (h * h)).collect();
    let a: Vec<Vec<f64>> = (0..w).map(|r| t.iter().map(|tj| tj.powi(r as i32)).collect()).collect();
    let mut rhs = vec![0.0; w];
    rhs[0] = 1.0;
    let b = solve_small(a, rhs);
    (1..=w).map(|j| b[j - 1] / (2.0 * (j as f64 * h).sin())).collect()
}

/// Symmetric second-derivative weights `(c_0, c_1..c_w)`:
/// `f''(0) ≈ c_0 f(0) + Σ_j c_j (f(jh) + f(−jh))`, exact on `cos(mx)`, `m ≤ w`.
pub fn fitted_second_derivative(half_width: usize, h: f64) -> (f64, Vec<f64>) {
    let w = half_width;
    let t: Vec<f64> = (1..=w).map(|j| 2.0 * (0.5 * j as f64 * h).sin().powi(2) / (h * h)).collect();
    let a: Vec<Vec<f64>> =
        (1..=w).map(|r| t.iter().map(|tj| tj.powi(r as i32)).collect()).collect();
    let mut rhs = vec![0.0; w];
    rhs[0] = 1.0;
    let e = solve_small(a, rhs);
    let c: Vec<f64> = e.iter().map(|ej| ej / (2.0 * h * h)).collect();
    let c0 = -2.0 * c.iter().sum::<f64>();
    (c0, c)
}

type Stencil = Vec<([i64; MAX_DIM], f64)>;

/// Linear map from node values to per-node jets `(∇ρ, ∇²ρ)` in the
/// orthonormal frame, stored row-wise.
#[derive(Clone, Debug)]
pub struct JetOperator {
    n: usize,
    order: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<[f64; SLOTS]>,
}

/// Position of Hessian entry `(a, b)`, `a ≤ b`, among the weight slots.
#[inline]
pub(crate) fn hess_slot(n: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    // row-major upper triangle
    let before: usize = (0..a).map(|r| n - r).sum();
    n + before + (b - a)
}

impl JetOperator {
    fn empty(n: usize) -> Self {
        Self { n, order: 0, row_ptr: vec![0], cols: vec![], weights: vec![] }
    }

    pub fn new(grid: &SphereGrid, order: usize) -> Result<Self> {
        if order < 2 || order % 2 != 0 {
            return invalid(format!("stencil order must be even and ≥ 2, got {order}"));
        }
        let n = grid.n;
        let max_half = order / 2 + 1;
        if grid.resolution.iter().any(|&r| r <= max_half) {
            return invalid("grid too coarse for the requested stencil order");
        }
        // 1D stencils per axis
        let mut d1: Vec<Stencil> = Vec::new();
        let mut d2: Vec<Stencil> = Vec::new();
        for a in 0..n {
            let polar = a < n - 1;
            let h = grid.steps[a];
            let w1 = if polar { order / 2 + 1 } else { order / 2 };
            let c1 = fitted_first_derivative(w1, h);
            let mut s1 = Vec::new();
            for (j, &c) in c1.iter().enumerate() {
                let mut o = [0i64; MAX_DIM];
                o[a] = j as i64 + 1;
                s1.push((o, c));
                o[a] = -(j as i64 + 1);
                s1.push((o, -c));
            }
            let (c0, c2) = fitted_second_derivative(order / 2, h);
            let mut s2 = vec![([0i64; MAX_DIM], c0)];
            for (j, &c) in c2.iter().enumerate() {
                let mut o = [0i64; MAX_DIM];
                o[a] = j as i64 + 1;
                s2.push((o, c));
                o[a] = -(j as i64 + 1);
                s2.push((o, c));
            }
            d1.push(s1);
            d2.push(s2);
        }
        let mixed = |a: usize, b: usize| -> Stencil {
            let mut out = Vec::new();
            for (oa, ca) in &d1[a] {
                for (ob, cb) in &d1[b] {
                    let mut o = *oa;
                    for x in 0..MAX_DIM {
                        o[x] += ob[x];
                    }
                    out.push((o, ca * cb));
                }
            }
            out
        };
        let mut dm = vec![vec![Stencil::new(); n]; n];
        for a in 0..n {
            for b in a + 1..n {
                dm[a][b] = mixed(a, b);
            }
        }

        let mut row_ptr = Vec::with_capacity(grid.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        let mut row: Vec<(usize, [f64; SLOTS])> = Vec::new();
        for node in 0..grid.len() {
            row.clear();
            let base = grid.multi_index(node);
            let ang = grid.angles[node];
            let mut add = |st: &Stencil, slot: usize, coef: f64| {
                if coef == 0.0 {
                    return;
                }
                for (o, c) in st {
                    let m = [base[0] as i64 + o[0], base[1] as i64 + o[1], base[2] as i64 + o[2]];
                    let col = grid.wrap(m);
                    let entry = match row.iter_mut().find(|(cc, _)| *cc == col) {
                        Some(e) => e,
                        None => {
                            row.push((col, [0.0; SLOTS]));
                            row.last_mut().unwrap()
                        }
                    };
                    entry.1[slot] += coef * c;
                }
            };
            let hs = |a, b| hess_slot(n, a, b);
            if n == 2 {
                let (s, c) = ang[0].sin_cos();
                add(&d1[0], 0, 1.0);
                add(&d1[1], 1, 1.0 / s);
                add(&d2[0], hs(0, 0), 1.0);
                // (ρ_θφ − cot θ ρ_φ) / sin θ
                add(&dm[0][1], hs(0, 1), 1.0 / s);
                add(&d1[1], hs(0, 1), -c / (s * s));
                // (ρ_φφ + sin θ cos θ ρ_θ) / sin² θ
                add(&d2[1], hs(1, 1), 1.0 / (s * s));
                add(&d1[0], hs(1, 1), c / s);
            } else {
                let (s1, c1) = ang[0].sin_cos();
                let (s2, c2) = ang[1].sin_cos();
                let l = [1.0, s1, s1 * s2];
                add(&d1[0], 0, 1.0);
                add(&d1[1], 1, 1.0 / l[1]);
                add(&d1[2], 2, 1.0 / l[2]);
                // H_11 = ρ_11
                add(&d2[0], hs(0, 0), 1.0);
                // H_12 = ρ_12 − (c1/s1) ρ_2
                add(&dm[0][1], hs(0, 1), 1.0 / (l[0] * l[1]));
                add(&d1[1], hs(0, 1), -(c1 / s1) / (l[0] * l[1]));
                // H_13 = ρ_13 − (c1/s1) ρ_3
                add(&dm[0][2], hs(0, 2), 1.0 / (l[0] * l[2]));
                add(&d1[2], hs(0, 2), -(c1 / s1) / (l[0] * l[2]));
                // H_22 = ρ_22 + s1 c1 ρ_1
                add(&d2[1], hs(1, 1), 1.0 / (l[1] * l[1]));
                add(&d1[0], hs(1, 1), s1 * c1 / (l[1] * l[1]));
                // H_23 = ρ_23 − (c2/s2) ρ_3
                add(&dm[1][2], hs(1, 2), 1.0 / (l[1] * l[2]));
                add(&d1[2], hs(1, 2), -(c2 / s2) / (l[1] * l[2]));
                // H_33 = ρ_33 + s1 c1 s2² ρ_1 + s2 c2 ρ_2
                add(&d2[2], hs(2, 2), 1.0 / (l[2] * l[2]));
                add(&d1[0], hs(2, 2), s1 * c1 * s2 * s2 / (l[2] * l[2]));
                add(&d1[1], hs(2, 2), s2 * c2 / (l[2] * l[2]));
            }
            row.sort_by_key(|e| e.0);
            // derivatives of constants vanish: store the center weight as minus
            // the sum of the others, and apply the stencil to differences
            let others: Vec<f64> = (0..SLOTS)
                .map(|s| row.iter().filter(|e| e.0 != node).map(|e| e.1[s]).sum())
                .collect();
            match row.iter_mut().find(|e| e.0 == node) {
                Some(center) => {
                    for s in 0..SLOTS {
                        center.1[s] = -others[s];
                    }
                }
                None => {
                    let mut w = [0.0; SLOTS];
                    for s in 0..SLOTS {
                        w[s] = -others[s];
                    }
                    row.push((node, w));
                    row.sort_by_key(|e| e.0);
                }
            }
            for (col, w) in &row {
                cols.push(*col);
                weights.push(*w);
            }
            row_ptr.push(cols.len());
        }
        Ok(Self { n, order, row_ptr, cols, weights })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Columns and slot weights of one node's stencil.
    pub fn row(&self, node: usize) -> (&[usize], &[[f64; SLOTS]]) {
        let r = self.row_ptr[node]..self.row_ptr[node + 1];
        (&self.cols[r.clone()], &self.weights[r])
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn jet_at(&self, node: usize, values: &[f64]) -> PointJet {
        let n = self.n;
        let (cols, ws) = self.row(node);
        let mut acc = [0.0; SLOTS];
        let center = values[node];
        for (&c, w) in cols.iter().zip(ws) {
            if c == node {
                continue;
            }
            let v = values[c] - center;
            for s in 0..SLOTS {
                acc[s] += w[s] * v;
            }
        }
        let mut grad = [0.0; MAX_DIM];
        grad[..n].copy_from_slice(&acc[..n]);
        let hess = SymMatrix::from_fn(n, |a, b| acc[hess_slot(n, a, b)]);
        PointJet { rho: values[node], grad, hess }
    }

    pub fn jets(&self, values: &[f64]) -> Vec<PointJet> {
        (0..self.row_ptr.len() - 1).map(|i| self.jet_at(i, values)).collect()
    }
}

/// Sampled radius function; `M = {ρ(z) z}`.
#[derive(Clone, Debug)]
pub struct RadialField {
    grid: Arc<SphereGrid>,
    values: Vec<f64>,
}

impl RadialField {
    pub fn new(grid: Arc<SphereGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return invalid(format!("field has {} values for {} nodes", values.len(), grid.len()));
        }
        if let Some(i) = values.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Precondition(format!(
                "radius at node {i} is {} (must be positive)",
                values[i]
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Arc<SphereGrid>, r: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![r; n])
    }

    pub fn from_fn(grid: Arc<SphereGrid>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let v = grid.sample(f);
        Self::new(grid, v)
    }

    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn jets(&self) -> Vec<PointJet> {
        self.grid.jets(self)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &RadialField) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Partition of the nodes into cells standing in for Borel sets of `S^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct BorelPartition {
    cell_of: Vec<usize>,
    labels: Vec<String>,
}

impl BorelPartition {
    pub fn from_cells(cell_of: Vec<usize>, labels: Vec<String>) -> Result<Self> {
        if let Some(&c) = cell_of.iter().find(|&&c| c >= labels.len()) {
            return invalid(format!("cell id {c} has no label"));
        }
        Ok(Self { cell_of, labels })
    }

    pub fn whole(grid: &SphereGrid) -> Self {
        Self { cell_of: vec![0; grid.len()], labels: vec!["sphere".into()] }
    }

    /// Cell 0 for `x_0 > 0`, cell 1 otherwise.
    pub fn hemispheres(grid: &SphereGrid) -> Self {
        let cell_of = (0..grid.len()).map(|i| if grid.point(i)[0] > 0.0 { 0 } else { 1 }).collect();
        Self { cell_of, labels: vec!["north".into(), "south".into()] }
    }

    /// `count` bands of equal width in the first polar angle.
    pub fn latitude_bands(grid: &SphereGrid, count: usize) -> Result<Self> {
        if count == 0 || count > grid.resolution[0] {
            return invalid(format!("band count {count} must be in 1..={}", grid.resolution[0]));
        }
        let cell_of = (0..grid.len())
            .map(|i| ((grid.angles(i)[0] / PI * count as f64) as usize).min(count - 1))
            .collect();
        let labels = (0..count).map(|b| format!("band{b}")).collect();
        Ok(Self { cell_of, labels })
    }

    /// Sign pattern of the first three Cartesian coordinates.
    pub fn octants(grid: &SphereGrid) -> Self {
        let cell_of = (0..grid.len())
            .map(|i| {
                let p = grid.point(i);
                (0..3).map(|a| if p[a] >= 0.0 { 0 } else { 1 << a }).sum()
            })
            .collect();
        let labels = (0..8)
            .map(|c| (0..3).map(|a| if c & (1 << a) == 0 { '+' } else { '-' }).collect())
            .collect();
        Self { cell_of, labels }
    }

    pub fn cell_count(&self) -> usize {
        self.labels.len()
    }

    pub fn cell_of(&self, node: usize) -> usize {
        self.cell_of[node]
    }

    pub fn cells(&self) -> &[usize] {
        &self.cell_of
    }

    pub fn label(&self, cell: usize) -> &str {
        &self.labels[cell]
    }
}

/// Per-node values read from or written to a delimited node table.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeTable {
    pub n: usize,
    pub resolution: Vec<usize>,
    pub stencil_order: usize,
    pub column: String,
    pub values: Vec<f64>,
}

const ANGLE_NAMES: [[&str; 3]; 2] = [["theta", "phi", ""], ["theta1", "theta2", "phi"]];

/// Writes one row per node: angle coordinates, then the value, with 17
/// significant digits.
pub fn write_node_table<W: Write>(
    out: &mut W,
    grid: &SphereGrid,
    column: &str,
    values: &[f64],
) -> Result<()> {
    let n = grid.dim();
    let res: Vec<String> = grid.resolution().iter().map(|r| r.to_string()).collect();
    writeln!(
        out,
        "# n={} resolution={} stencil_order={}",
        n,
        res.join("x"),
        grid.stencil_order()
    )?;
    let names = &ANGLE_NAMES[n - 2][..n];
    writeln!(out, "{},{}", names.join(","), column)?;
    for (i, v) in values.iter().enumerate() {
        for a in grid.angles(i) {
            write!(out, "{a:.16e},")?;
        }
        writeln!(out, "{v:.16e}")?;
    }
    Ok(())
}

pub fn read_node_table<R: BufRead>(input: R) -> Result<NodeTable> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty node table".into()))??;
    let meta = header
        .strip_prefix('#')
        .ok_or_else(|| Error::Parse("node table must start with a '#' header".into()))?;
    let (mut n, mut res, mut order) = (None, None, None);
    for kv in meta.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Parse(format!("bad header item {kv}")))?;
        let bad = |_| Error::Parse(format!("bad header value {kv}"));
        match k {
            "n" => n = Some(v.parse::<usize>().map_err(bad)?),
            "resolution" => {
                res = Some(
                    v.split('x')
                        .map(|s| s.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(bad)?,
                )
            }
            "stencil_order" => order = Some(v.parse::<usize>().map_err(bad)?),
            _ => return Err(Error::Parse(format!("unknown header key {k}"))),
        }
    }
    let (n, resolution, stencil_order) = match (n, res, order) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::Parse("header needs n, resolution and stencil_order".into())),
    };
    if n != 2 && n != 3 {
        return Err(Error::Parse(format!("unsupported dimension {n}")));
    }
    let cols = lines.next().ok_or_else(|| Error::Parse("missing column line".into()))??;
    let names: Vec<&str> = cols.split(',').collect();
    if names.len() != n + 1 || names[..n] != ANGLE_NAMES[n - 2][..n] {
        return Err(Error::Parse(format!("unexpected columns: {cols}")));
    }
    let column = names[n].trim().to_string();
    let mut values = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n + 1 {
            return Err(Error::Parse(format!("row {} has {} fields", lineno + 1, fields.len())));
        }
        let v: f64 = fields[n]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("row {}: bad number {}", lineno + 1, fields[n])))?;
        values.push(v);
    }
    let expect: usize = resolution.iter().product();
    if values.len() != expect {
        return Err(Error::Parse(format!("table has {} rows, grid has {expect} nodes", values.len())));
    }
    Ok(NodeTable { n, resolution, stencil_order, column, values })
}

impl NodeTable {
    pub fn build_grid(&self) -> Result<SphereGrid> {
        SphereGrid::new(self.n, &self.resolution, self.stencil_order)
    }

    /// Whether the table was written for a grid with this layout.
    pub fn matches(&self, grid: &SphereGrid) -> bool {
        self.n == grid.dim() && self.resolution == grid.resolution()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g2(nt: usize, np: usize) -> SphereGrid {
        SphereGrid::new(2, &[nt, np], 4).unwrap()
    }

    #[test]
    fn weights_sum_to_area() {
        let g = g2(32, 64);
        assert!((g.weights().iter().sum::<f64>() / (4.0 * PI) - 1.0).abs() < 1e-10);
        let g3 = SphereGrid::new(3, &[16, 16, 32], 2).unwrap();
        assert!((g3.weights().iter().sum::<f64>() / (2.0 * PI * PI) - 1.0).abs() < 1e-10);
        assert!(g.weights().iter().all(|&w| w > 0.0));
        assert!(g3.weights().iter().all(|&w| w > 0.0));
    }

    #[test]
    fn integrates_cos_squared() {
        let g = g2(32, 64);
        let v = g.sample(|x| x[0] * x[0]);
        assert!((g.integrate(&v) - 4.0 * PI / 3.0).abs() < 1e-6);
        let one = vec![1.0; g.len()];
        assert!((g.integrate(&one) - 4.0 * PI).abs() < 1e-10);
    }

    #[test]
    fn s3_quadrature_moments() {
        let g = SphereGrid::new(3, &[12, 10, 16], 2).unwrap();
        // ∫ x_i² over S^3 = 2π²/4
        for a in 0..4 {
            let v = g.sample(|x| x[a] * x[a]);
            assert!((g.integrate(&v) - PI * PI / 2.0).abs() < 1e-10, "axis {a}");
        }
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(SphereGrid::new(4, &[8, 8, 8, 8], 2).is_err());
        assert!(SphereGrid::new(2, &[6, 16], 2).is_err());
        assert!(SphereGrid::new(2, &[8, 15], 2).is_err());
        assert!(SphereGrid::new(2, &[8, 16], 3).is_err());
        assert!(SphereGrid::new(2, &[8, 16, 4], 2).is_err());
    }

    #[test]
    fn no_node_on_a_pole() {
        let g = SphereGrid::new(3, &[8, 8, 16], 2).unwrap();
        for i in 0..g.len() {
            let a = g.angles(i);
            assert!(a[0].sin() > 0.1 && a[1].sin() > 0.1);
        }
    }

    #[test]
    fn fitted_stencils_are_exact_on_low_harmonics() {
        let h = 0.2;
        let c1 = fitted_first_derivative(2, h);
        let (c0, c2) = fitted_second_derivative(2, h);
        for m in 0..=2 {
            let mf = m as f64;
            let x0 = 0.37;
            let f = |x: f64| (mf * x).cos() + 0.5 * (mf * x).sin();
            let df = -mf * (mf * x0).sin() + 0.5 * mf * (mf * x0).cos();
            let ddf = -mf * mf * f(x0);
            let d1: f64 = c1.iter().enumerate().map(|(j, c)| c * (f(x0 + (j + 1) as f64 * h) - f(x0 - (j + 1) as f64 * h))).sum();
            let d2: f64 = c0 * f(x0)
                + c2.iter().enumerate().map(|(j, c)| c * (f(x0 + (j + 1) as f64 * h) + f(x0 - (j + 1) as f64 * h))).sum::<f64>();
            assert!((d1 - df).abs() < 1e-13, "m={m}: {d1} vs {df}");
            assert!((d2 - ddf).abs() < 1e-12, "m={m}: {d2} vs {ddf}");
        }
    }

    #[test]
    fn fitted_stencils_reach_their_order() {
        let f = |x: f64| (0.7 * x).exp();
        for &(w, order) in &[(1usize, 2.0), (2, 4.0), (3, 6.0)] {
            let err = |h: f64| {
                let c1 = fitted_first_derivative(w, h);
                let d: f64 = c1.iter().enumerate().map(|(j, c)| c * (f((j + 1) as f64 * h) - f(-((j + 1) as f64) * h))).sum();
                (d - 0.7).abs()
            };
            let rate = (err(0.2) / err(0.1)).log2();
            assert!((rate - order).abs() < 0.3, "w={w}: rate {rate}");
        }
    }

    #[test]
    fn wrap_is_involutive_across_poles() {
        let g = g2(8, 16);
        assert_eq!(g.wrap([-1, 3, 0]), g.wrap([0, 11, 0]));
        assert_eq!(g.wrap([8, 3, 0]), g.wrap([7, 11, 0]));
        assert_eq!(g.wrap([2, -1, 0]), g.wrap([2, 15, 0]));
        let g3 = SphereGrid::new(3, &[8, 8, 16], 2).unwrap();
        assert_eq!(g3.wrap([-1, 2, 1]), g3.wrap([0, 5, 9]));
        assert_eq!(g3.wrap([3, -2, 1]), g3.wrap([3, 1, 9]));
        // ghost points sit on the same spot of the sphere as their images
        for &(m, img) in &[([-1i64, 2, 1], [0i64, 5, 9]), ([3, -2, 1], [3, 1, 9])] {
            let ang = |m: [i64; 3]| {
                let mut a = [0.0; 3];
                a[0] = (m[0] as f64 + 0.5) * PI / 8.0;
                a[1] = (m[1] as f64 + 0.5) * PI / 8.0;
                a[2] = m[2] as f64 * 2.0 * PI / 16.0;
                embed(3, &a).0
            };
            let (p, q) = (ang(m), ang(img));
            for i in 0..4 {
                assert!((p[i] - q[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn frames_are_orthonormal() {
        for g in [g2(8, 16), SphereGrid::new(3, &[8, 8, 16], 2).unwrap()] {
            let n = g.dim();
            for i in (0..g.len()).step_by(7) {
                let mut vecs = vec![g.point(i).to_vec()];
                for a in 0..n {
                    vecs.push(g.frame(i, a).to_vec());
                }
                for a in 0..=n {
                    for b in 0..=n {
                        let d: f64 = vecs[a].iter().zip(&vecs[b]).map(|(x, y)| x * y).sum();
                        let e = if a == b { 1.0 } else { 0.0 };
                        assert!((d - e).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn jets_of_constants_vanish() {
        for g in [g2(16, 32), SphereGrid::new(3, &[8, 8, 16], 2).unwrap()] {
            let f = RadialField::constant(Arc::new(g), 1.7).unwrap();
            for j in f.jets() {
                assert!(j.grad().iter().all(|x| x.abs() < 1e-12));
                assert!(j.hess.contract(&j.hess) < 1e-20);
                assert_eq!(j.rho, 1.7);
            }
        }
    }

    /// A linear function `b·x` restricted to the sphere has gradient equal
    /// to the tangential part of `b` and Hessian `−(b·x) I`.
    #[test]
    fn jets_of_linear_functions_are_exact() {
        for g in [g2(16, 32), SphereGrid::new(3, &[8, 8, 16], 2).unwrap()] {
            let n = g.dim();
            let b = [0.3, -0.2, 0.5, 0.25];
            let vals = g.sample(|x| x.iter().zip(&b).map(|(a, c)| a * c).sum());
            let op = g.jet_operator();
            for i in 0..g.len() {
                let j = op.jet_at(i, &vals);
                let bx = vals[i];
                for a in 0..n {
                    let t: f64 = g.frame(i, a).iter().zip(&b).map(|(e, c)| e * c).sum();
                    assert!((j.grad[a] - t).abs() < 1e-11, "grad {a} at {i}");
                    for c in 0..n {
                        let e = if a == c { -bx } else { 0.0 };
                        assert!((j.hess.get(a, c) - e).abs() < 1e-9, "hess {a}{c} at {i}: {}", j.hess.get(a, c));
                    }
                }
            }
        }
    }

    #[test]
    fn stencil_pattern_is_structurally_symmetric() {
        for g in [g2(8, 16), SphereGrid::new(3, &[8, 8, 16], 2).unwrap()] {
            let op = g.jet_operator();
            for i in 0..g.len() {
                for &c in op.row(i).0 {
                    assert!(op.row(c).0.contains(&i), "{i} -> {c} not reciprocal");
                }
            }
        }
    }

    #[test]
    fn partitions() {
        let g = g2(16, 32);
        let one = vec![1.0; g.len()];
        let halves = g.integrate_cells(&BorelPartition::hemispheres(&g), &one);
        assert!((halves[0] - 2.0 * PI).abs() < 1e-10 && (halves[1] - 2.0 * PI).abs() < 1e-10);
        let bands = BorelPartition::latitude_bands(&g, 4).unwrap();
        let cos = g.sample(|x| x[0]);
        let v = g.integrate_cells(&bands, &cos);
        assert!((v[0] + v[3]).abs() < 1e-12 && (v[1] + v[2]).abs() < 1e-12);
        assert!(v[0] > 0.0);
        let oct = BorelPartition::octants(&g);
        let cells = g.integrate_cells(&oct, &one);
        // nodes at φ = 0 sit on a boundary, so only the x0 reflection is exact
        for c in 0..8 {
            assert!((cells[c] - cells[c ^ 1]).abs() < 1e-12);
        }
        let total = g.integrate(&one);
        assert!((compensated_sum(cells.iter().copied()) - total).abs() < 1e-14 * total);
    }

    #[test]
    fn node_table_roundtrip_is_bit_exact() {
        let g = g2(8, 16);
        let vals: Vec<f64> = (0..g.len()).map(|i| 1.0 + (i as f64 * 0.7).sin() / 3.0).collect();
        let mut buf = Vec::new();
        write_node_table(&mut buf, &g, "rho", &vals).unwrap();
        let t = read_node_table(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(t.values, vals);
        assert_eq!(t.column, "rho");
        assert!(t.matches(&g));
        assert!(read_node_table(std::io::Cursor::new(b"theta,phi,rho\n".to_vec())).is_err());
    }

    #[test]
    fn nearest_node_finds_itself() {
        for g in [g2(16, 32), SphereGrid::new(3, &[8, 8, 16], 2).unwrap()] {
            for i in (0..g.len()).step_by(5) {
                assert_eq!(g.nearest_node(g.point(i)), i);
            }
        }
    }

    #[test]
    fn field_requires_positive_values() {
        let g = Arc::new(g2(8, 16));
        let mut v = vec![1.0; g.len()];
        v[3] = 0.0;
        assert!(RadialField::new(g.clone(), v).is_err());
        assert!(RadialField::new(g, vec![1.0; 5]).is_err());
    }
}
