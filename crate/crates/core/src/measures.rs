//! Curvature measures of radial graphs and a Monte Carlo parallel-set check
//! of the Steiner formula.
//!
//! The `(n−k)`-th curvature measure of a cell `β ⊂ S^n` is
//! `∫_β σ_k(κ) ρ^{n−1} √(ρ² + |∇ρ|²) dμ`, the integral of `σ_k` over the part
//! of `M` lying radially above `β`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binomial;
use crate::error::{invalid, Error, Result};
use crate::geometry::{evaluate, point_geometry, PointJet};
use crate::grid::{BorelPartition, RadialField, SphereGrid};

/// Cellwise curvature measure of a field, optionally against a prescribed
/// density.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureReport {
    /// Order of the symmetric function integrated.
    pub k: usize,
    /// Index `m = n − k` of the curvature measure `𝒞_m`.
    pub m: usize,
    pub labels: Vec<String>,
    pub computed: Vec<f64>,
    pub prescribed: Option<Vec<f64>>,
}

impl MeasureReport {
    pub fn total(&self) -> f64 {
        self.computed.iter().sum()
    }

    pub fn prescribed_total(&self) -> Option<f64> {
        self.prescribed.as_ref().map(|p| p.iter().sum())
    }

    /// `|computed − prescribed| / |prescribed|` per cell.
    pub fn relative_errors(&self) -> Option<Vec<f64>> {
        self.prescribed.as_ref().map(|p| {
            self.computed.iter().zip(p).map(|(c, q)| (c - q).abs() / q.abs()).collect()
        })
    }

    pub fn max_relative_error(&self) -> Option<f64> {
        self.relative_errors().map(|e| e.into_iter().fold(0.0, f64::max))
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "cell,label,computed,prescribed,relative_error")?;
        let rel = self.relative_errors();
        for (c, v) in self.computed.iter().enumerate() {
            match (&self.prescribed, &rel) {
                (Some(p), Some(r)) => writeln!(
                    out,
                    "{c},{},{v:.16e},{:.16e},{:.16e}",
                    self.labels[c], p[c], r[c]
                )?,
                _ => writeln!(out, "{c},{},{v:.16e},,", self.labels[c])?,
            }
        }
        Ok(())
    }
}

/// Nodal values of `σ_j(κ)` times the area density, for `j = 0..=n`.
fn sigma_densities(field: &RadialField) -> Vec<[f64; 4]> {
    let op = field.grid().jet_operator();
    let rho = field.values();
    (0..rho.len())
        .into_par_iter()
        .map(|i| {
            let jet = op.jet_at(i, rho);
            let e = evaluate(&jet, 0, 0.0);
            let density = jet.rho.powi(jet.dim() as i32 - 1) * jet.w();
            let mut out = [0.0; 4];
            for (o, s) in out.iter_mut().zip(&e.sigmas) {
                *o = s * density;
            }
            out
        })
        .collect()
}

/// Per-cell `∫_β σ_k(κ) ρ^{n−1} √(ρ² + |∇ρ|²) dμ`.
pub fn curvature_measure(
    field: &RadialField,
    k: usize,
    partition: &BorelPartition,
) -> Result<MeasureReport> {
    let grid = field.grid();
    let n = grid.dim();
    if k > n {
        return invalid(format!("order k = {k} exceeds dimension {n}"));
    }
    if partition.cells().len() != grid.len() {
        return invalid("partition does not match the grid");
    }
    let dens: Vec<f64> = sigma_densities(field).iter().map(|d| d[k]).collect();
    Ok(MeasureReport {
        k,
        m: n - k,
        labels: (0..partition.cell_count()).map(|c| partition.label(c).to_string()).collect(),
        computed: grid.integrate_cells(partition, &dens),
        prescribed: None,
    })
}

/// [`curvature_measure`] together with `∫_β f dμ` for nodal `f`.
pub fn curvature_measure_against(
    field: &RadialField,
    k: usize,
    partition: &BorelPartition,
    f: &[f64],
) -> Result<MeasureReport> {
    let mut report = curvature_measure(field, k, partition)?;
    if f.len() != field.grid().len() {
        return invalid("prescribed density does not match the grid");
    }
    report.prescribed = Some(field.grid().integrate_cells(partition, f));
    Ok(report)
}

/// Per-cell `C(n, n−m)^{-1} ∫_β σ_{n−m} dμ_g`, the normalized curvature
/// measure `𝒞_m`. For `m = n` this is the area of the part of `M` over `β`.
pub fn normalized_measure(field: &RadialField, m: usize, partition: &BorelPartition) -> Result<Vec<f64>> {
    let n = field.grid().dim();
    if m > n {
        return invalid(format!("measure index m = {m} exceeds dimension {n}"));
    }
    let r = curvature_measure(field, n - m, partition)?;
    let c = binomial(n, n - m);
    Ok(r.computed.iter().map(|v| v / c).collect())
}

/// Total of [`normalized_measure`] over the sphere.
pub fn area_and_quermass_totals(field: &RadialField, m: usize) -> Result<f64> {
    let whole = BorelPartition::whole(field.grid());
    Ok(normalized_measure(field, m, &whole)?[0])
}

/// Monte Carlo estimates of `ℋ^{n+1}(A_ρ(K, β))` for a set of offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelSetEstimate {
    pub n: usize,
    pub offsets: Vec<f64>,
    pub samples: usize,
    /// Volume of the sampling cube.
    pub box_volume: f64,
    pub labels: Vec<String>,
    /// `volumes[cell][j]` for offset `j`.
    pub volumes: Vec<Vec<f64>>,
    pub std_errors: Vec<Vec<f64>>,
    /// Normalized measures `𝒞_0..𝒞_n` per cell from the Steiner fit.
    pub coefficients: Vec<Vec<f64>>,
    pub coefficient_errors: Vec<Vec<f64>>,
}

impl ParallelSetEstimate {
    /// Estimates summed over all cells, with their standard errors.
    pub fn total_volumes(&self) -> (Vec<f64>, Vec<f64>) {
        let nf = self.samples as f64;
        (0..self.offsets.len())
            .map(|j| {
                let v: f64 = self.volumes.iter().map(|c| c[j]).sum();
                let p = v / self.box_volume;
                (v, self.box_volume * (p * (1.0 - p) / nf).sqrt())
            })
            .unzip()
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "cell,label,offset,volume,std_error")?;
        for (c, label) in self.labels.iter().enumerate() {
            for (j, r) in self.offsets.iter().enumerate() {
                writeln!(
                    out,
                    "{c},{label},{r:.16e},{:.16e},{:.16e}",
                    self.volumes[c][j], self.std_errors[c][j]
                )?;
            }
        }
        writeln!(out)?;
        writeln!(out, "cell,label,m,coefficient,std_error")?;
        for (c, label) in self.labels.iter().enumerate() {
            for m in 0..=self.n {
                writeln!(
                    out,
                    "{c},{label},{m},{:.16e},{:.16e}",
                    self.coefficients[c][m], self.coefficient_errors[c][m]
                )?;
            }
        }
        Ok(())
    }
}

/// Exponential map at `base` with frame `frame`: `cos|v| x + sin|v| v̂`.
fn exp_map(base: &[f64], frame: &[&[f64]], v: &[f64]) -> Vec<f64> {
    let r = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let (s, c) = r.sin_cos();
    let sinc = if r > 1e-12 { s / r } else { 1.0 - r * r / 6.0 };
    let mut out: Vec<f64> = base.iter().map(|x| c * x).collect();
    for (a, e) in frame.iter().enumerate() {
        for (o, ea) in out.iter_mut().zip(e.iter()) {
            *o += sinc * v[a] * ea;
        }
    }
    out
}

/// Inverse of [`exp_map`] for `z` in the open hemisphere around `base`.
fn log_map(base: &[f64], frame: &[&[f64]], z: &[f64]) -> Vec<f64> {
    let c: f64 = base.iter().zip(z).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
    let tang: Vec<f64> = frame.iter().map(|e| e.iter().zip(z).map(|(a, b)| a * b).sum()).collect();
    let s = tang.iter().map(|a| a * a).sum::<f64>().sqrt();
    let theta = s.atan2(c);
    let scale = if s > 1e-15 { theta / s } else { 1.0 };
    tang.iter().map(|t| t * scale).collect()
}

/// The surface near a node, modeled by the second-order jet of `ρ` in
/// exponential coordinates.
struct LocalPatch<'a> {
    base: &'a [f64],
    frame: Vec<&'a [f64]>,
    jet: &'a PointJet,
}

impl LocalPatch<'_> {
    fn radius(&self, v: &[f64]) -> f64 {
        let n = v.len();
        let mut r = self.jet.rho;
        for a in 0..n {
            r += self.jet.grad[a] * v[a];
            for b in 0..n {
                r += 0.5 * self.jet.hess.get(a, b) * v[a] * v[b];
            }
        }
        r
    }

    fn point(&self, v: &[f64]) -> Vec<f64> {
        let r = self.radius(v);
        exp_map(self.base, &self.frame, v).into_iter().map(|z| r * z).collect()
    }

    fn dist2(&self, v: &[f64], x: &[f64]) -> f64 {
        self.point(v).iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum()
    }
}

/// Nearest-point queries against a convex radial surface.
struct Projector<'a> {
    grid: &'a SphereGrid,
    jets: Vec<PointJet>,
}

impl<'a> Projector<'a> {
    fn patch(&self, node: usize) -> LocalPatch<'_> {
        let n = self.grid.dim();
        LocalPatch {
            base: self.grid.point(node),
            frame: (0..n).map(|a| self.grid.frame(node, a)).collect(),
            jet: &self.jets[node],
        }
    }

    fn radius_at(&self, z: &[f64]) -> f64 {
        let node = self.grid.nearest_node(z);
        let p = self.patch(node);
        p.radius(&log_map(p.base, &p.frame, z))
    }

    /// Foot point direction, distance and node of the foot point for `x`
    /// outside the body.
    fn project(&self, x: &[f64]) -> (f64, usize) {
        let n = self.grid.dim();
        let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut z: Vec<f64> = x.iter().map(|a| a / nx).collect();
        let mut node = self.grid.nearest_node(&z);
        let mut d2 = f64::INFINITY;
        for _ in 0..4 {
            let p = self.patch(node);
            let mut v = log_map(p.base, &p.frame, &z);
            // two Newton steps on |X(v) − x|² with difference derivatives
            for _ in 0..2 {
                let h = 1e-4;
                let f0 = p.dist2(&v, x);
                let mut g = vec![0.0; n];
                let mut hm = nalgebra::DMatrix::<f64>::zeros(n, n);
                let shifted = |v: &[f64], a: usize, da: f64, b: usize, db: f64| {
                    let mut w = v.to_vec();
                    w[a] += da;
                    w[b] += db;
                    p.dist2(&w, x)
                };
                for a in 0..n {
                    let fp = shifted(&v, a, h, a, 0.0);
                    let fm = shifted(&v, a, -h, a, 0.0);
                    g[a] = (fp - fm) / (2.0 * h);
                    hm[(a, a)] = (fp - 2.0 * f0 + fm) / (h * h);
                    for b in 0..a {
                        let hab = (shifted(&v, a, h, b, h) - shifted(&v, a, h, b, -h)
                            - shifted(&v, a, -h, b, h)
                            + shifted(&v, a, -h, b, -h))
                            / (4.0 * h * h);
                        hm[(a, b)] = hab;
                        hm[(b, a)] = hab;
                    }
                }
                let rhs = nalgebra::DVector::from_vec(g.iter().map(|q| -q).collect());
                let Some(step) = hm.clone().cholesky().map(|c| c.solve(&rhs)) else { break };
                for a in 0..n {
                    v[a] += step[a];
                }
            }
            d2 = p.dist2(&v, x);
            z = exp_map(p.base, &p.frame, &v);
            let next = self.grid.nearest_node(&z);
            if next == node {
                break;
            }
            node = next;
        }
        (d2.sqrt(), node)
    }
}

const CHUNK: usize = 1 << 14;

/// Monte Carlo volumes of the local parallel sets `A_ρ(K, β)` of the body
/// bounded by a convex field, for each cell of `partition`, with a fit of
/// the Steiner polynomial `Σ_m C(n+1, m) 𝒞_m ρ^{n+1−m} / (n+1)`.
///
/// Samples are drawn uniformly from a cube containing the outer parallel
/// body. Chunk `c` uses stream `c` of a generator seeded with `seed`, so the
/// result does not depend on the thread count.
pub fn parallel_set_mc(
    field: &RadialField,
    partition: &BorelPartition,
    offsets: &[f64],
    samples: usize,
    seed: u64,
) -> Result<ParallelSetEstimate> {
    let grid = field.grid();
    let n = grid.dim();
    if samples == 0 {
        return invalid("parallel-set estimate needs at least one sample");
    }
    if offsets.is_empty() || offsets.iter().any(|r| !(*r > 0.0)) {
        return invalid("offsets must be positive");
    }
    if offsets.len() < n + 1 {
        return invalid(format!("fitting the Steiner polynomial needs at least {} offsets", n + 1));
    }
    if partition.cells().len() != grid.len() {
        return invalid("partition does not match the grid");
    }
    let jets = field.jets();
    for (i, jet) in jets.iter().enumerate() {
        let geo = point_geometry(jet)?;
        if !(geo.kappa[0] > 0.0) {
            return Err(Error::Precondition(format!(
                "surface is not strictly convex at node {i} (κ_min = {:.3e})",
                geo.kappa[0]
            )));
        }
    }
    let proj = Projector { grid, jets };
    let r_max = offsets.iter().copied().fold(0.0, f64::max);
    let outer = field.max() * 1.02 + r_max;
    let box_volume = (2.0 * outer).powi(n as i32 + 1);
    let cells = partition.cell_count();
    let nj = offsets.len();
    let mut sorted = offsets.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let chunks = samples.div_ceil(CHUNK);
    // per chunk: hits[cell][j] for 0 < d ≤ offset_j
    let counts: Vec<Vec<Vec<u64>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let len = CHUNK.min(samples - c * CHUNK);
            let mut hits = vec![vec![0u64; nj]; cells];
            let mut x = vec![0.0; n + 1];
            for _ in 0..len {
                for xi in x.iter_mut() {
                    *xi = rng.random_range(-outer..outer);
                }
                let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                if nx > outer || nx == 0.0 {
                    continue;
                }
                let z: Vec<f64> = x.iter().map(|a| a / nx).collect();
                if nx <= proj.radius_at(&z) {
                    continue;
                }
                let (d, node) = proj.project(&x);
                if d > r_max {
                    continue;
                }
                let cell = partition.cell_of(node);
                for (j, r) in offsets.iter().enumerate() {
                    if d <= *r {
                        hits[cell][j] += 1;
                    }
                }
            }
            hits
        })
        .collect();
    let mut total = vec![vec![0u64; nj]; cells];
    for h in &counts {
        for c in 0..cells {
            for j in 0..nj {
                total[c][j] += h[c][j];
            }
        }
    }

    let nf = samples as f64;
    let mut volumes = Vec::with_capacity(cells);
    let mut std_errors = Vec::with_capacity(cells);
    let mut coefficients = Vec::with_capacity(cells);
    let mut coefficient_errors = Vec::with_capacity(cells);
    for c in 0..cells {
        let p: Vec<f64> = total[c].iter().map(|&h| h as f64 / nf).collect();
        volumes.push(p.iter().map(|q| q * box_volume).collect::<Vec<_>>());
        std_errors.push(p.iter().map(|q| box_volume * (q * (1.0 - q) / nf).sqrt()).collect());
        // nested events: Cov(1{d ≤ r_i}, 1{d ≤ r_j}) = p_min − p_i p_j
        let cov = nalgebra::DMatrix::from_fn(nj, nj, |i, j| {
            box_volume * box_volume * (p[i].min(p[j]) - p[i] * p[j]) / nf
        });
        let (coef, err) = steiner_fit(n, offsets, &volumes[c], &cov);
        coefficients.push(coef);
        coefficient_errors.push(err);
    }
    Ok(ParallelSetEstimate {
        n,
        offsets: offsets.to_vec(),
        samples,
        box_volume,
        labels: (0..cells).map(|c| partition.label(c).to_string()).collect(),
        volumes,
        std_errors,
        coefficients,
        coefficient_errors,
    })
}

/// Generalized least squares for `V(r) = Σ_{m=0}^n a_m r^{n+1−m}`, returning
/// `𝒞_m = a_m (n+1) / C(n+1, m)` and standard errors.
fn steiner_fit(n: usize, offsets: &[f64], v: &[f64], cov: &nalgebra::DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let nj = offsets.len();
    let x = nalgebra::DMatrix::from_fn(nj, n + 1, |j, m| offsets[j].powi((n + 1 - m) as i32));
    let y = nalgebra::DVector::from_column_slice(v);
    // a tiny ridge keeps the weight matrix invertible when a count is zero
    let ridge = 1e-300 + 1e-12 * cov.diagonal().max();
    let w = (cov + nalgebra::DMatrix::identity(nj, nj) * ridge)
        .try_inverse()
        .unwrap_or_else(|| nalgebra::DMatrix::identity(nj, nj));
    let xtw = x.transpose() * &w;
    let normal = &xtw * &x;
    let Some(inv) = normal.try_inverse() else {
        return (vec![f64::NAN; n + 1], vec![f64::NAN; n + 1]);
    };
    let a = &inv * (xtw * y);
    let scale = |m: usize| (n + 1) as f64 / binomial(n + 1, m);
    let coef = (0..=n).map(|m| a[m] * scale(m)).collect();
    let err = (0..=n).map(|m| inv[(m, m)].max(0.0).sqrt() * scale(m)).collect();
    (coef, err)
}
