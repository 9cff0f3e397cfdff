use std::sync::Arc;

use latfield::correctors::{assemble_predictor, DefectKind, ScrewSpec};
use latfield::greens::LatticeGreens;
use latfield::potentials::{build_model, make_defect_model, DefectModel, DefectSpec, Params};
use latfield::solver::{table_radius, CellProblem, GreenTable, Scheme, SolverOptions};

struct Setup {
    model: Arc<DefectModel>,
    pred: latfield::correctors::PredictorStack,
    table: GreenTable,
}

fn vacancy(r_table: f64) -> Setup {
    let host = build_model("triangular-pair", &Params::new()).unwrap();
    let model = Arc::new(make_defect_model(host.clone(), &DefectSpec::vacancy()).unwrap());
    let pred = assemble_predictor(host.as_ref(), DefectKind::Point, 0, vec![], 1.0).unwrap();
    let g = LatticeGreens::compute(host.as_ref(), 32.0, 512).unwrap();
    let table = GreenTable::build(&g, r_table).unwrap();
    Setup { model, pred, table }
}

fn augmented(s: &Setup, radius: f64, r_out: f64) -> (Arc<CellProblem>, latfield::solver::CellSolution) {
    let problem = Arc::new(
        CellProblem::new(s.model.clone(), &s.pred, radius, Scheme::Augmented { p: 1 }, Some(r_out), Some(&s.table)).unwrap(),
    );
    let opts = SolverOptions { gradient_tolerance: 1e-11, ..SolverOptions::default() };
    let sol = problem.solve(&opts, None).unwrap();
    (problem, sol)
}

#[test]
fn galerkin_conditions_hold_for_multipole_coefficients() {
    let s = vacancy(table_radius(&latfield::lattice::Lattice::triangular_nn(2), 48.0, 1));
    let (problem, sol) = augmented(&s, 16.0, 32.0);
    let (_, g) = problem.energy_and_gradient(&sol.report.dofs).unwrap();
    let gb = &g[problem.n_core()..];
    assert_eq!(gb.len(), 4);
    assert!(gb.iter().all(|v| v.abs() < 1e-8), "{gb:?}");
    assert!(sol.report.stability_ok);
}

#[test]
fn coefficients_do_not_depend_on_buffer() {
    let s = vacancy(table_radius(&latfield::lattice::Lattice::triangular_nn(2), 48.0, 1));
    let (_, a) = augmented(&s, 16.0, 32.0);
    let (_, b) = augmented(&s, 16.0, 44.0);
    for (x, y) in a.report.multipole_dofs.iter().zip(&b.report.multipole_dofs) {
        assert!((x - y).abs() < 1e-6, "{:?} vs {:?}", a.report.multipole_dofs, b.report.multipole_dofs);
    }
}

#[test]
fn solves_are_deterministic() {
    let s = vacancy(table_radius(&latfield::lattice::Lattice::triangular_nn(2), 24.0, 1));
    let (_, a) = augmented(&s, 12.0, 24.0);
    let (_, b) = augmented(&s, 12.0, 24.0);
    assert_eq!(a.v, b.v);
    assert_eq!(a.report.multipole_dofs, b.report.multipole_dofs);
}

#[test]
fn screw_net_force_coefficient_is_small() {
    // u_CLE already carries the Burgers vector; the fitted monopole must vanish
    let host = build_model("antiplane-sine", &Params::new()).unwrap();
    let model = Arc::new(DefectModel::homogeneous(host.clone()));
    let pred = assemble_predictor(host.as_ref(), DefectKind::Screw(ScrewSpec::default()), 0, vec![], 1.0).unwrap();
    let g = LatticeGreens::compute(host.as_ref(), 32.0, 512).unwrap();
    let table = GreenTable::build(&g, table_radius(host.lattice(), 32.0, 1)).unwrap();
    let problem = Arc::new(CellProblem::new(model, &pred, 16.0, Scheme::Augmented { p: 1 }, Some(32.0), Some(&table)).unwrap());
    let sol = problem.solve(&SolverOptions::default(), None).unwrap();
    let b = sol.coeffs.unwrap();
    assert!(b.coeffs[0][0].get(&[]).abs() < 1e-12);
    assert!(sol.report.converged && sol.report.energy < 0.0);
}
