//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Every key has a default, unknown
//! keys are rejected, and the resolved values are echoed to `manifest.txt`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use curvature_measure::function::{NamedFunction, Polynomial};
use curvature_measure::solver::SolverConfig;

use crate::CliError;

/// Documented keys with their defaults. `auto` means the value is derived
/// from other keys.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("n", "2", "sphere dimension, 2 or 3"),
    ("k", "1", "curvature order"),
    ("resolution", "auto", "node counts per angle, e.g. 32x64 or 16x16x32"),
    ("stencil_order", "auto", "finite-difference order: 2, 4, 6 or 8"),
    ("f", "const:1", "prescribed density: const:<c>, cos:<a>, poly:<expr>, table:<path> or none"),
    ("field", "none", "input surface radius: const:<c>, cos:<a>, poly:<expr>, table:<path> or none"),
    ("manufactured", "none", "exact radius used to generate f for a recovery run"),
    ("recovery_tol", "1e-6", "max-norm recovery error allowed for a manufactured run"),
    ("newton_tol", "1e-10", "RMS residual target"),
    ("max_newton", "30", "Newton iterations per homotopy step"),
    ("t_step_init", "1", "first homotopy step"),
    ("t_step_min", "1e-4", "smallest homotopy step before giving up"),
    ("step_grow", "1.5", "step factor after a quick Newton solve"),
    ("step_shrink", "0.5", "step factor after a failed Newton solve"),
    ("fast_iterations", "3", "iteration count that counts as a quick solve"),
    ("estimate_error", "true", "estimate the discretization error per accepted step"),
    ("singular_values", "false", "estimate the smallest Jacobian singular value per accepted step"),
    ("audit_factor", "10", "pinching tolerance in units of (error estimate + newton_tol)"),
    ("partition", "hemispheres", "whole, hemispheres, octants or bands:<count>"),
    ("prescribed", "false", "compare the measure run against f"),
    ("mc_samples", "0", "Monte Carlo samples for the parallel-set estimate, 0 to skip"),
    ("mc_offsets", "0.25,0.5,1.0", "parallel-set offsets"),
    ("delta", "0", "shift added to the convexity potential"),
    ("convexity_samples", "2000", "sample points for the convexity check"),
    ("samples", "10000", "random samples per property suite"),
    ("seed", "0", "seed for every random stream"),
];

/// Where a function on the sphere comes from.
#[derive(Clone, Debug)]
pub enum Source {
    Function(NamedFunction),
    Table(PathBuf),
    None,
}

impl Source {
    fn parse(key: &str, value: &str) -> Result<Self, CliError> {
        let v = value.trim();
        if v == "none" {
            return Ok(Source::None);
        }
        if let Some(path) = v.strip_prefix("table:") {
            return Ok(Source::Table(PathBuf::from(path.trim())));
        }
        if let Some(a) = v.strip_prefix("cos:") {
            let a: f64 = a.trim().parse().map_err(|_| bad(key, value))?;
            let poly = Polynomial::parse(&format!("1 + {a:e}*x0")).map_err(|_| bad(key, value))?;
            return Ok(Source::Function(NamedFunction::new(v, Arc::new(poly))));
        }
        NamedFunction::parse(v)
            .map(Source::Function)
            .map_err(|e| CliError::Config(format!("{key}: {e}")))
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Source::None)
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Function(func) => f.write_str(func.source()),
            Source::Table(p) => write!(f, "table:{}", p.display()),
            Source::None => f.write_str("none"),
        }
    }
}

fn bad(key: &str, value: &str) -> CliError {
    CliError::Config(format!("bad value for {key}: '{value}'"))
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub command: String,
    pub n: usize,
    pub k: usize,
    /// `None` when the resolution should come from an input table.
    pub resolution: Option<Vec<usize>>,
    pub stencil_order: Option<usize>,
    pub f: Source,
    pub field: Source,
    pub manufactured: Option<NamedFunction>,
    pub recovery_tol: f64,
    pub solver: SolverConfig,
    pub audit_factor: f64,
    pub partition: String,
    pub prescribed: bool,
    pub mc_samples: usize,
    pub mc_offsets: Vec<f64>,
    pub delta: f64,
    pub convexity_samples: usize,
    pub samples: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Parses `key = value` lines. Duplicate and unknown keys are errors.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", no + 1)))?;
        let k = k.trim();
        check_key(k)?;
        if map.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(CliError::Config(format!("line {}: duplicate key '{k}'", no + 1)));
        }
    }
    Ok(map)
}

pub fn check_key(k: &str) -> Result<(), CliError> {
    if KEYS.iter().any(|(name, _, _)| *name == k) {
        Ok(())
    } else {
        Err(CliError::Config(format!("unknown key '{k}'")))
    }
}

fn parse_resolution(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(['x', 'X', ','])
        .map(|p| p.trim().parse::<usize>().map_err(|_| bad("resolution", s)))
        .collect()
}

fn parse_num<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T, CliError> {
    let v = &map[key];
    v.parse().map_err(|_| bad(key, v))
}

impl RunConfig {
    /// Resolves defaults, the config file and command-line overrides, in
    /// that order of increasing priority.
    pub fn resolve(
        command: &str,
        config_file: Option<&Path>,
        overrides: &[(String, String)],
        out: PathBuf,
    ) -> Result<Self, CliError> {
        let mut map: BTreeMap<String, String> =
            KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();
        if let Some(path) = config_file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            map.extend(parse_pairs(&text)?);
        }
        for (k, v) in overrides {
            check_key(k)?;
            map.insert(k.clone(), v.clone());
        }

        let n: usize = parse_num(&map, "n")?;
        if n != 2 && n != 3 {
            return Err(CliError::Config(format!("n must be 2 or 3, got {n}")));
        }
        let k: usize = parse_num(&map, "k")?;
        if k == 0 || k > n {
            return Err(CliError::Config(format!("k must be in 1..={n}, got {k}")));
        }
        let resolution = match map["resolution"].as_str() {
            "auto" => None,
            s => {
                let r = parse_resolution(s)?;
                if r.len() != n {
                    return Err(CliError::Config(format!("resolution '{s}' does not have {n} entries")));
                }
                Some(r)
            }
        };
        let stencil_order = match map["stencil_order"].as_str() {
            "auto" => None,
            _ => Some(parse_num(&map, "stencil_order")?),
        };
        let manufactured = match Source::parse("manufactured", &map["manufactured"])? {
            Source::Function(f) => Some(f),
            Source::None => None,
            Source::Table(_) => {
                return Err(CliError::Config("manufactured must be an analytic function".into()))
            }
        };
        let bool_of = |key: &str| -> Result<bool, CliError> {
            match map[key].as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                v => Err(bad(key, v)),
            }
        };
        let solver = SolverConfig {
            newton_tol: parse_num(&map, "newton_tol")?,
            max_newton: parse_num(&map, "max_newton")?,
            t_step_init: parse_num(&map, "t_step_init")?,
            t_step_min: parse_num(&map, "t_step_min")?,
            step_grow: parse_num(&map, "step_grow")?,
            step_shrink: parse_num(&map, "step_shrink")?,
            fast_iterations: parse_num(&map, "fast_iterations")?,
            estimate_error: bool_of("estimate_error")?,
            singular_values: bool_of("singular_values")?,
            restart_perturbation: None,
        };
        let mc_offsets = map["mc_offsets"]
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad("mc_offsets", &map["mc_offsets"])))
            .collect::<Result<Vec<_>, _>>()?;
        let partition = map["partition"].clone();
        if !matches!(partition.as_str(), "whole" | "hemispheres" | "octants")
            && partition.strip_prefix("bands:").and_then(|c| c.parse::<usize>().ok()).is_none()
        {
            return Err(bad("partition", &partition));
        }
        Ok(Self {
            command: command.to_string(),
            n,
            k,
            resolution,
            stencil_order,
            f: Source::parse("f", &map["f"])?,
            field: Source::parse("field", &map["field"])?,
            manufactured,
            recovery_tol: parse_num(&map, "recovery_tol")?,
            solver,
            audit_factor: parse_num(&map, "audit_factor")?,
            partition,
            prescribed: bool_of("prescribed")?,
            mc_samples: parse_num(&map, "mc_samples")?,
            mc_offsets,
            delta: parse_num(&map, "delta")?,
            convexity_samples: parse_num(&map, "convexity_samples")?,
            samples: parse_num(&map, "samples")?,
            seed: parse_num(&map, "seed")?,
            out,
        })
    }

    pub fn default_resolution(&self) -> Vec<usize> {
        if self.n == 2 {
            vec![32, 64]
        } else {
            vec![16, 16, 32]
        }
    }

    pub fn default_stencil_order(&self) -> usize {
        if self.n == 2 {
            4
        } else {
            2
        }
    }

    /// Writes every key with its resolved value. `resolution` and
    /// `stencil_order` are passed in because they may come from an input table.
    pub fn write_manifest<W: Write>(
        &self,
        out: &mut W,
        resolution: &[usize],
        stencil_order: usize,
    ) -> std::io::Result<()> {
        let s = &self.solver;
        let res: Vec<String> = resolution.iter().map(|r| r.to_string()).collect();
        let offsets: Vec<String> = self.mc_offsets.iter().map(|r| format!("{r:e}")).collect();
        let manufactured =
            self.manufactured.as_ref().map(|m| m.source().to_string()).unwrap_or("none".into());
        writeln!(out, "# curvmeas {} {}", env!("CARGO_PKG_VERSION"), self.command)?;
        let rows: Vec<(&str, String)> = vec![
            ("n", self.n.to_string()),
            ("k", self.k.to_string()),
            ("resolution", res.join("x")),
            ("stencil_order", stencil_order.to_string()),
            ("f", self.f.to_string()),
            ("field", self.field.to_string()),
            ("manufactured", manufactured),
            ("recovery_tol", format!("{:e}", self.recovery_tol)),
            ("newton_tol", format!("{:e}", s.newton_tol)),
            ("max_newton", s.max_newton.to_string()),
            ("t_step_init", format!("{:e}", s.t_step_init)),
            ("t_step_min", format!("{:e}", s.t_step_min)),
            ("step_grow", format!("{:e}", s.step_grow)),
            ("step_shrink", format!("{:e}", s.step_shrink)),
            ("fast_iterations", s.fast_iterations.to_string()),
            ("estimate_error", s.estimate_error.to_string()),
            ("singular_values", s.singular_values.to_string()),
            ("audit_factor", format!("{:e}", self.audit_factor)),
            ("partition", self.partition.clone()),
            ("prescribed", self.prescribed.to_string()),
            ("mc_samples", self.mc_samples.to_string()),
            ("mc_offsets", offsets.join(",")),
            ("delta", format!("{:e}", self.delta)),
            ("convexity_samples", self.convexity_samples.to_string()),
            ("samples", self.samples.to_string()),
            ("seed", self.seed.to_string()),
        ];
        debug_assert_eq!(rows.len(), KEYS.len());
        for (k, v) in rows {
            writeln!(out, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_comments() {
        let m = parse_pairs("# comment\nn = 3\n\nk=2\n").unwrap();
        assert_eq!(m["n"], "3");
        assert_eq!(m["k"], "2");
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(parse_pairs("colour = red").is_err());
        assert!(parse_pairs("n = 2\nn = 3").is_err());
        assert!(parse_pairs("n 2").is_err());
    }

    #[test]
    fn resolves_defaults_and_overrides() {
        let over = vec![("n".to_string(), "3".to_string()), ("k".into(), "2".into())];
        let c = RunConfig::resolve("solve", None, &over, "out".into()).unwrap();
        assert_eq!((c.n, c.k), (3, 2));
        assert_eq!(c.resolution, None);
        assert_eq!(c.default_resolution(), vec![16, 16, 32]);
        assert_eq!(c.solver.newton_tol, 1e-10);
        let bad = vec![("resolution".to_string(), "8x16".to_string()), ("n".into(), "3".into())];
        assert!(RunConfig::resolve("solve", None, &bad, "out".into()).is_err());
    }

    #[test]
    fn cos_preset() {
        match Source::parse("f", "cos:0.5").unwrap() {
            Source::Function(f) => assert!((f.eval(&[0.5, 0.0, 0.0]) - 1.25).abs() < 1e-15),
            _ => panic!("expected a function"),
        }
        assert!(Source::parse("f", "cos:x").is_err());
        assert!(matches!(Source::parse("f", "table:a.txt").unwrap(), Source::Table(_)));
    }

    #[test]
    fn manifest_lists_every_key() {
        let c = RunConfig::resolve("verify", None, &[], "out".into()).unwrap();
        let mut buf = Vec::new();
        c.write_manifest(&mut buf, &[32, 64], 4).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for (k, _, _) in KEYS {
            assert!(text.lines().any(|l| l.starts_with(&format!("{k} = "))), "{k}");
        }
    }
}
