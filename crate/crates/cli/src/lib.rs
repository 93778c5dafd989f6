//! Reproducible command-line runs over the `curvature_measure` library.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid configuration,
//! 3 homotopy failure, 4 Newton failure, 5 validation or property failure.

pub mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use curvature_measure::diagnostics::{
    audit_bounds, check_f_convexity, check_strict_convexity, run_property_suites, Verdict,
};
use curvature_measure::error::Error;
use curvature_measure::grid::{read_node_table, write_node_table, BorelPartition, NodeTable, RadialField, SphereGrid};
use curvature_measure::measures::{curvature_measure, curvature_measure_against, normalized_measure, parallel_set_mc};
use curvature_measure::solver::{
    continuity_solve, forward_density, forward_density_analytic, write_trace, HomotopyState, ProblemSpec,
};
use thiserror::Error as ThisError;

pub use config::{RunConfig, Source};

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("homotopy failed: {0}")]
    Homotopy(String),
    #[error("Newton failed: {0}")]
    Newton(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Homotopy(_) => 3,
            CliError::Newton(_) => 4,
            CliError::Validation(_) => 5,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_) | Error::Parse(_) => CliError::Config(msg),
            Error::HomotopyFailure { .. } => CliError::Homotopy(msg),
            Error::NonConvergence { .. } | Error::Stagnation { .. } | Error::LinearSolve(_) => {
                CliError::Newton(msg)
            }
            Error::Precondition(_) | Error::Inadmissible { .. } => CliError::Validation(msg),
            Error::Io(io) => CliError::Io(io),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    match cfg.command.as_str() {
        "solve" => cmd_solve(cfg),
        "forward" => cmd_forward(cfg),
        "measure" => cmd_measure(cfg),
        "verify" => cmd_verify(cfg),
        "check-convexity" => cmd_check_convexity(cfg),
        other => Err(CliError::Config(format!("unknown command '{other}'"))),
    }
}

fn create(cfg: &RunConfig, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(cfg.out.join(name))?))
}

fn read_table(path: &Path) -> Result<NodeTable> {
    let file = File::open(path)
        .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
    Ok(read_node_table(BufReader::new(file))?)
}

/// Input tables plus the grid they share. A table fixes the layout unless
/// the configuration names a different one, which is an error.
struct Inputs {
    grid: Arc<SphereGrid>,
    f: Option<NodeTable>,
    field: Option<NodeTable>,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let load = |s: &Source| match s {
        Source::Table(p) => read_table(p).map(Some),
        _ => Ok(None),
    };
    let f = load(&cfg.f)?;
    let field = load(&cfg.field)?;
    let layout = field.as_ref().or(f.as_ref());
    let (resolution, order) = match layout {
        Some(t) => {
            if t.n != cfg.n {
                return Err(CliError::Config(format!("table is for n = {}, config has n = {}", t.n, cfg.n)));
            }
            if let Some(r) = &cfg.resolution {
                if *r != t.resolution {
                    return Err(CliError::Config("resolution does not match the input table".into()));
                }
            }
            (t.resolution.clone(), cfg.stencil_order.unwrap_or(t.stencil_order))
        }
        None => (
            cfg.resolution.clone().unwrap_or_else(|| cfg.default_resolution()),
            cfg.stencil_order.unwrap_or_else(|| cfg.default_stencil_order()),
        ),
    };
    let grid = Arc::new(SphereGrid::new(cfg.n, &resolution, order)?);
    for t in [&f, &field].into_iter().flatten() {
        if !t.matches(&grid) {
            return Err(CliError::Config("input tables disagree on the grid".into()));
        }
    }
    let mut m = create(cfg, "manifest.txt")?;
    cfg.write_manifest(&mut m, grid.resolution(), grid.stencil_order())?;
    m.flush()?;
    Ok(Inputs { grid, f, field })
}

fn nodal(source: &Source, table: &Option<NodeTable>, grid: &SphereGrid, key: &str) -> Result<Vec<f64>> {
    match (source, table) {
        (Source::Function(f), _) => Ok(grid.sample(|x| f.eval(x))),
        (Source::Table(_), Some(t)) => Ok(t.values.clone()),
        _ => Err(CliError::Config(format!("{key} is required for this command"))),
    }
}

fn partition(cfg: &RunConfig, grid: &SphereGrid) -> Result<BorelPartition> {
    Ok(match cfg.partition.as_str() {
        "whole" => BorelPartition::whole(grid),
        "hemispheres" => BorelPartition::hemispheres(grid),
        "octants" => BorelPartition::octants(grid),
        s => {
            let count = s.strip_prefix("bands:").and_then(|c| c.parse().ok()).unwrap_or(0);
            BorelPartition::latitude_bands(grid, count)?
        }
    })
}

fn list_nodes(bad: &[usize]) -> String {
    let shown: Vec<String> = bad.iter().take(20).map(|i| i.to_string()).collect();
    let more = if bad.len() > 20 { format!(" and {} more", bad.len() - 20) } else { String::new() };
    format!("{}{more}", shown.join(", "))
}

fn write_states(cfg: &RunConfig, states: &[HomotopyState]) -> Result<()> {
    let mut w = create(cfg, "states.csv")?;
    writeln!(
        w,
        "t,residual_norm,newton_iters,min_kappa_margin,rho_min,rho_max,max_grad,max_h_over_u,max_a2,discretization_error,min_singular_value"
    )?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
    for s in states {
        writeln!(
            w,
            "{:.16e},{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
            s.t,
            s.residual_norm,
            s.newton_iters,
            s.min_kappa_margin,
            s.bounds.rho_min,
            s.bounds.rho_max,
            s.bounds.max_grad,
            s.max_h_over_u,
            s.max_a2,
            opt(s.discretization_error),
            opt(s.min_singular_value)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Solves for the radius, then writes the field, trace, per-step states,
/// measure round trip and bound audit.
pub fn cmd_solve(cfg: &RunConfig) -> Result<()> {
    if cfg.k >= cfg.n {
        return Err(CliError::Config(format!("solve needs k < n, got k = {}", cfg.k)));
    }
    let inputs = load_inputs(cfg)?;
    let grid = inputs.grid.clone();
    let f = match &cfg.manufactured {
        Some(m) => {
            let (f, bad) = forward_density_analytic(&grid, m, cfg.k);
            if !bad.is_empty() {
                return Err(CliError::Config(format!(
                    "manufactured radius is not admissible at nodes {}",
                    list_nodes(&bad)
                )));
            }
            f
        }
        None => nodal(&cfg.f, &inputs.f, &grid, "f")?,
    };
    // a bad f or solver setting is a configuration problem, caught before compute
    let spec = ProblemSpec::new(cfg.k, grid.clone(), f.clone(), cfg.solver.clone())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let sol = match continuity_solve(&spec) {
        Ok(s) => s,
        Err(Error::HomotopyFailure { t, cause, trace }) => {
            write_states(cfg, &trace)?;
            return Err(CliError::Homotopy(format!("stopped at t = {t:.6}: {cause}")));
        }
        Err(e) => return Err(e.into()),
    };

    let mut w = create(cfg, "field.txt")?;
    write_node_table(&mut w, &grid, "rho", sol.field.values())?;
    w.flush()?;
    let mut w = create(cfg, "f.txt")?;
    write_node_table(&mut w, &grid, "f", &f)?;
    w.flush()?;
    let mut w = create(cfg, "trace.csv")?;
    write_trace(&mut w, &sol.trace)?;
    w.flush()?;
    write_states(cfg, &sol.states)?;

    let report = curvature_measure_against(&sol.field, cfg.k, &partition(cfg, &grid)?, &f)?;
    let mut w = create(cfg, "measure.csv")?;
    report.write(&mut w)?;
    w.flush()?;

    let audit = audit_bounds(&sol.states, cfg.audit_factor, cfg.solver.newton_tol);
    let mut w = create(cfg, "audit.csv")?;
    audit.write(&mut w)?;
    w.flush()?;

    let last = sol.final_state();
    println!(
        "solved: {} homotopy steps, residual {:.3e}, radius in [{:.6}, {:.6}]",
        sol.states.len(),
        last.residual_norm,
        last.bounds.rho_min,
        last.bounds.rho_max
    );
    if let Some(rel) = report.max_relative_error() {
        println!("measure round trip: max relative error {rel:.3e}");
    }

    let mut failures = Vec::new();
    if let Some(m) = &cfg.manufactured {
        let exact = grid.sample(|x| m.eval(x));
        let err = sol.field.values().iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let mut w = create(cfg, "recovery.csv")?;
        writeln!(w, "max_error,discretization_estimate,tolerance,passed")?;
        let est = last.discretization_error.map(|e| format!("{e:.16e}")).unwrap_or_default();
        let ok = err <= cfg.recovery_tol;
        writeln!(w, "{err:.16e},{est},{:.16e},{ok}", cfg.recovery_tol)?;
        w.flush()?;
        println!("recovery: max error {err:.3e} (tolerance {:.1e})", cfg.recovery_tol);
        if !ok {
            failures.push(format!("recovery error {err:.3e} exceeds {:.1e}", cfg.recovery_tol));
        }
    }
    if !audit.passed() {
        failures.push("bound audit failed, see audit.csv".into());
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(failures.join("; ")))
    }
}

/// Writes `f` for a given surface. Analytic radii are differentiated along
/// great circles, tables with the grid stencils.
pub fn cmd_forward(cfg: &RunConfig) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let grid = inputs.grid.clone();
    let (f, bad) = match (&cfg.field, &inputs.field) {
        (Source::Function(r), _) => forward_density_analytic(&grid, r, cfg.k),
        (Source::Table(_), Some(t)) => forward_density(&RadialField::new(grid.clone(), t.values.clone())?, cfg.k),
        _ => return Err(CliError::Config("field is required for forward".into())),
    };
    if !bad.is_empty() {
        return Err(CliError::Validation(format!(
            "curvatures leave the admissible cone at nodes {}",
            list_nodes(&bad)
        )));
    }
    let mut w = create(cfg, "f.txt")?;
    write_node_table(&mut w, &grid, "f", &f)?;
    w.flush()?;
    let (lo, hi) = f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    println!("forward: f in [{lo:.6}, {hi:.6}] on {} nodes", f.len());
    Ok(())
}

/// Curvature measures of a given surface, optionally against `f` and with a
/// Monte Carlo parallel-set estimate.
pub fn cmd_measure(cfg: &RunConfig) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let grid = inputs.grid.clone();
    let field = RadialField::new(grid.clone(), nodal(&cfg.field, &inputs.field, &grid, "field")?)?;
    let part = partition(cfg, &grid)?;
    let report = if cfg.prescribed {
        let f = nodal(&cfg.f, &inputs.f, &grid, "f")?;
        curvature_measure_against(&field, cfg.k, &part, &f)?
    } else {
        curvature_measure(&field, cfg.k, &part)?
    };
    let mut w = create(cfg, "measure.csv")?;
    report.write(&mut w)?;
    w.flush()?;
    println!("measure: total {:.12}", report.total());

    let mut w = create(cfg, "direct.csv")?;
    writeln!(w, "cell,label,m,measure")?;
    for m in 0..=cfg.n {
        let cells = normalized_measure(&field, m, &part)?;
        for (c, v) in cells.iter().enumerate() {
            writeln!(w, "{c},{},{m},{v:.16e}", part.label(c))?;
        }
    }
    w.flush()?;

    if cfg.mc_samples > 0 {
        let est = parallel_set_mc(&field, &part, &cfg.mc_offsets, cfg.mc_samples, cfg.seed)?;
        let mut w = create(cfg, "steiner.csv")?;
        est.write(&mut w)?;
        w.flush()?;
        let (v, se) = est.total_volumes();
        for ((r, v), se) in cfg.mc_offsets.iter().zip(&v).zip(&se) {
            println!("parallel set r = {r}: volume {v:.6} ± {se:.6}");
        }
    }
    Ok(())
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<()> {
    let mut m = create(cfg, "manifest.txt")?;
    let res = cfg.resolution.clone().unwrap_or_else(|| cfg.default_resolution());
    cfg.write_manifest(&mut m, &res, cfg.stencil_order.unwrap_or_else(|| cfg.default_stencil_order()))?;
    m.flush()?;
    let report = run_property_suites(cfg.n, cfg.k, cfg.samples, cfg.seed)?;
    let mut w = create(cfg, "suite.csv")?;
    report.write(&mut w)?;
    w.flush()?;
    for p in &report.properties {
        println!(
            "{}: {} checked, {} skipped, {} failed, min gap {:.3e}",
            p.name, p.checked, p.skipped, p.failed, p.min_gap
        );
    }
    if report.passed() {
        Ok(())
    } else {
        let dumps: Vec<String> = report
            .properties
            .iter()
            .filter_map(|p| p.first_failure.as_ref().map(|d| format!("{}: {d}", p.name)))
            .collect();
        Err(CliError::Validation(format!("property violated; {}", dumps.join("; "))))
    }
}

pub fn cmd_check_convexity(cfg: &RunConfig) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let f = match &cfg.f {
        Source::Function(f) => f,
        _ => return Err(CliError::Config("check-convexity needs an analytic f".into())),
    };
    let cert = check_f_convexity(f, cfg.n, cfg.k, cfg.delta, cfg.convexity_samples, cfg.seed)?;
    let mut w = create(cfg, "convexity.txt")?;
    cert.write(&mut w)?;
    w.flush()?;
    println!("potential convexity: {} (min eigenvalue {:.3e})", cert.verdict, cert.min_hessian_eigenvalue);
    let mut ok = cert.verdict == Verdict::Pass;
    if !cfg.field.is_none() {
        let grid = inputs.grid.clone();
        let field = RadialField::new(grid.clone(), nodal(&cfg.field, &inputs.field, &grid, "field")?)?;
        let strict = check_strict_convexity(&field)?;
        let mut w = create(cfg, "strict.txt")?;
        strict.write(&mut w)?;
        w.flush()?;
        println!("strict convexity: {} (min curvature {:.3e})", strict.verdict, strict.min_kappa);
        ok &= strict.verdict == Verdict::Pass;
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::Validation("convexity check failed".into()))
    }
}
