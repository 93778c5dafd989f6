//! Functions on the sphere: closures and a small polynomial grammar used by
//! configuration files.
//!
//! Grammar: `const:<value>` or `poly:<expr>`, where `<expr>` is a sum of
//! terms like `0.15*x0`, `-x1^2*x2` or `2.5`. Variables are the Cartesian
//! coordinates `x0..x3` of the unit vector.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::PointJet;
use crate::symfun::{SymMatrix, MAX_DIM};

pub trait SphereFunction: Send + Sync {
    fn eval(&self, x: &[f64]) -> f64;
}

impl<F> SphereFunction for F
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn eval(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// Polynomial in the ambient coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    terms: Vec<(f64, [u32; 4])>,
}

impl Polynomial {
    pub fn constant(c: f64) -> Self {
        Self { terms: vec![(c, [0; 4])] }
    }

    pub fn parse(src: &str) -> Result<Self> {
        let s: String = src.chars().filter(|c| !c.is_whitespace()).collect();
        if s.is_empty() {
            return Err(Error::Parse("empty polynomial".into()));
        }
        let mut terms = Vec::new();
        // split on top-level signs, keeping exponents like 1e-3 intact
        let bytes = s.as_bytes();
        let mut start = 0;
        for i in 1..=bytes.len() {
            let at_end = i == bytes.len();
            let split = !at_end
                && (bytes[i] == b'+' || bytes[i] == b'-')
                && !matches!(bytes[i - 1], b'e' | b'E' | b'*' | b'^' | b'+' | b'-');
            if at_end || split {
                terms.push(parse_term(&s[start..i])?);
                start = i;
            }
        }
        Ok(Self { terms })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(c, pw)| {
                pw.iter().enumerate().fold(*c, |acc, (i, &p)| {
                    if p == 0 {
                        acc
                    } else {
                        acc * x.get(i).copied().unwrap_or(0.0).powi(p as i32)
                    }
                })
            })
            .sum()
    }

    /// Largest variable index used, if any.
    pub fn max_variable(&self) -> Option<usize> {
        self.terms.iter().flat_map(|(_, pw)| (0..4).filter(move |&i| pw[i] > 0)).max()
    }
}

fn parse_term(t: &str) -> Result<(f64, [u32; 4])> {
    let (sign, body) = match t.as_bytes().first() {
        Some(b'+') => (1.0, &t[1..]),
        Some(b'-') => (-1.0, &t[1..]),
        _ => (1.0, t),
    };
    if body.is_empty() {
        return Err(Error::Parse(format!("dangling sign in '{t}'")));
    }
    let mut coef = sign;
    let mut pw = [0u32; 4];
    for factor in body.split('*') {
        if let Some(var) = factor.strip_prefix('x') {
            let (idx, exp) = match var.split_once('^') {
                Some((i, e)) => (i, e),
                None => (var, "1"),
            };
            let idx: usize = idx
                .parse()
                .ok()
                .filter(|&i| i < 4)
                .ok_or_else(|| Error::Parse(format!("bad variable '{factor}'")))?;
            let exp: u32 =
                exp.parse().map_err(|_| Error::Parse(format!("bad exponent in '{factor}'")))?;
            pw[idx] += exp;
        } else {
            let v: f64 =
                factor.parse().map_err(|_| Error::Parse(format!("bad factor '{factor}'")))?;
            coef *= v;
        }
    }
    Ok((coef, pw))
}

impl SphereFunction for Polynomial {
    fn eval(&self, x: &[f64]) -> f64 {
        Polynomial::eval(self, x)
    }
}

/// A function named in configuration, kept together with its source text.
#[derive(Clone)]
pub struct NamedFunction {
    source: String,
    func: Arc<dyn SphereFunction>,
}

impl NamedFunction {
    pub fn new(source: impl Into<String>, func: Arc<dyn SphereFunction>) -> Self {
        Self { source: source.into(), func }
    }

    /// Parses `const:<c>` or `poly:<expr>`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        let (kind, body) = spec
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("function '{spec}' needs a 'const:' or 'poly:' prefix")))?;
        let poly = match kind {
            "const" => Polynomial::constant(
                body.trim().parse().map_err(|_| Error::Parse(format!("bad constant '{body}'")))?,
            ),
            "poly" => Polynomial::parse(body)?,
            _ => return Err(Error::Parse(format!("unknown function kind '{kind}'"))),
        };
        Ok(Self { source: spec.to_string(), func: Arc::new(poly) })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.func.eval(x)
    }

    pub fn as_fn(&self) -> Arc<dyn SphereFunction> {
        self.func.clone()
    }
}

impl fmt::Debug for NamedFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NamedFunction({})", self.source)
    }
}

impl SphereFunction for NamedFunction {
    fn eval(&self, x: &[f64]) -> f64 {
        self.func.eval(x)
    }
}

/// Jet of a smooth function at the unit vector `x`, in the orthonormal
/// tangent frame `frame`, from sixth-order differences along great circles.
/// Accurate to roughly `1e-11` for functions with moderate derivatives.
pub fn analytic_jet(func: &dyn SphereFunction, x: &[f64], frame: &[&[f64]]) -> PointJet {
    let n = frame.len();
    let h = 0.02;
    let along = |v: &[f64], s: f64| -> f64 {
        let (sn, cs) = s.sin_cos();
        let p: Vec<f64> = x.iter().zip(v).map(|(a, b)| cs * a + sn * b).collect();
        func.eval(&p)
    };
    let d1 = |v: &[f64]| {
        let f = |j: f64| along(v, j * h);
        (45.0 * (f(1.0) - f(-1.0)) - 9.0 * (f(2.0) - f(-2.0)) + (f(3.0) - f(-3.0))) / (60.0 * h)
    };
    let d2 = |v: &[f64]| {
        let f = |j: f64| along(v, j * h);
        (270.0 * (f(1.0) + f(-1.0)) - 27.0 * (f(2.0) + f(-2.0)) + 2.0 * (f(3.0) + f(-3.0))
            - 490.0 * f(0.0))
            / (180.0 * h * h)
    };
    let mut grad = [0.0; MAX_DIM];
    let mut diag = [0.0; MAX_DIM];
    for a in 0..n {
        grad[a] = d1(frame[a]);
        diag[a] = d2(frame[a]);
    }
    let hess = SymMatrix::from_fn(n, |a, b| {
        if a == b {
            diag[a]
        } else {
            let v: Vec<f64> =
                frame[a].iter().zip(frame[b]).map(|(p, q)| (p + q) / 2f64.sqrt()).collect();
            d2(&v) - 0.5 * (diag[a] + diag[b])
        }
    });
    PointJet { rho: func.eval(x), grad, hess }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_polynomials() {
        let p = Polynomial::parse("1 + 0.15*x0 + 0.1*x1*x2 - x0^2").unwrap();
        let x = [0.5, 0.2, -0.3];
        let want = 1.0 + 0.075 + 0.1 * 0.2 * -0.3 - 0.25;
        assert!((p.eval(&x) - want).abs() < 1e-15);
        assert_eq!(p.max_variable(), Some(2));
        let q = Polynomial::parse("-2e-1*x3 + 3").unwrap();
        assert!((q.eval(&[0.0, 0.0, 0.0, 1.0]) - 2.8).abs() < 1e-15);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Polynomial::parse("").is_err());
        assert!(Polynomial::parse("1 + y").is_err());
        assert!(Polynomial::parse("x7").is_err());
        assert!(Polynomial::parse("1 +").is_err());
        assert!(NamedFunction::parse("sin:1").is_err());
        assert!(NamedFunction::parse("1.0").is_err());
    }

    /// `b·x` has gradient `b_tan` and Hessian `−(b·x) I`.
    #[test]
    fn analytic_jet_of_linear_function() {
        let b = [0.3, -0.5, 0.2];
        let f = move |x: &[f64]| 2.0 + x.iter().zip(&b).map(|(p, q)| p * q).sum::<f64>();
        let th: f64 = 0.7;
        let x = [th.cos(), th.sin(), 0.0];
        let e0 = [-th.sin(), th.cos(), 0.0];
        let e1 = [0.0, 0.0, 1.0];
        let jet = analytic_jet(&f, &x, &[&e0, &e1]);
        let bx: f64 = x.iter().zip(&b).map(|(p, q)| p * q).sum();
        assert!((jet.grad[0] - (-0.3 * th.sin() - 0.5 * th.cos())).abs() < 1e-11);
        assert!((jet.grad[1] - 0.2).abs() < 1e-11);
        assert!((jet.hess.get(0, 0) + bx).abs() < 1e-10);
        assert!((jet.hess.get(1, 1) + bx).abs() < 1e-10);
        assert!(jet.hess.get(0, 1).abs() < 1e-10);
    }

    #[test]
    fn named_functions() {
        let f = NamedFunction::parse("const: 2.5").unwrap();
        assert_eq!(f.eval(&[1.0, 0.0, 0.0]), 2.5);
        let g = NamedFunction::parse("poly:1+x1").unwrap();
        assert_eq!(g.eval(&[0.0, 0.5, 0.0]), 1.5);
        let h = |x: &[f64]| x[0] * 2.0;
        assert_eq!(SphereFunction::eval(&h, &[0.25]), 0.5);
    }
}
