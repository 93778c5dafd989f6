use std::sync::Arc;

use curvature_measure::grid::{read_node_table, write_node_table, BorelPartition, RadialField, SphereGrid};
use curvature_measure::measures::curvature_measure_against;
use curvature_measure::solver::{continuity_solve, forward_density, ProblemSpec, SolverConfig};

#[test]
fn forward_solve_measure_round_trip() {
    let g = Arc::new(SphereGrid::with_default_order(2, &[16, 32]).unwrap());
    let target = RadialField::from_fn(g.clone(), |x| 1.2 + 0.1 * x[2] - 0.05 * x[0] * x[1]).unwrap();
    let (f, bad) = forward_density(&target, 1);
    assert!(bad.is_empty());

    // through the node-table format, as the command line does
    let mut buf = Vec::new();
    write_node_table(&mut buf, &g, "f", &f).unwrap();
    let table = read_node_table(buf.as_slice()).unwrap();
    assert_eq!(table.values, f);

    let spec = ProblemSpec::new(1, g.clone(), table.values, SolverConfig::default()).unwrap();
    let sol = continuity_solve(&spec).unwrap();
    // f from discrete jets makes the target an exact discrete solution
    let diff = sol
        .field
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-9, "{diff}");

    let report = curvature_measure_against(&sol.field, 1, &BorelPartition::octants(&g), &f).unwrap();
    assert!(report.max_relative_error().unwrap() < 1e-9);
}

#[test]
fn constant_density_in_three_dimensions() {
    let g = Arc::new(SphereGrid::with_default_order(3, &[8, 8, 16]).unwrap());
    let spec = ProblemSpec::new(1, g, vec![12.0; 8 * 8 * 16], SolverConfig::default()).unwrap();
    let sol = continuity_solve(&spec).unwrap();
    // σ_1 = 3/ρ and the density is ρ³, so ρ² = 12 / 3
    assert!(sol.field.values().iter().all(|r| (r - 2.0).abs() < 1e-10));
}
