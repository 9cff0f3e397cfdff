//! Browser bindings for latfield. Each operation returns a JSON string so the
//! page needs no generated type glue beyond plain functions.

use std::sync::Arc;

use latfield::correctors::{assemble_predictor, DefectKind};
use latfield::greens::LatticeGreens;
use latfield::potentials::{
    build_model, cauchy_born, make_defect_model, stability_constant, validate_symmetry, DefectSpec, Params,
};
use latfield::solver::{table_radius, CellProblem, GreenTable, Scheme, SolverOptions};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Largest supercell the page may request; keeps the FFT memory bounded in a tab.
pub const MAX_SUPERCELL: usize = 1024;
/// Largest cell radius for the in-browser solve.
pub const MAX_SOLVE_RADIUS: f64 = 16.0;

/// Operation result; errors are user-facing messages.
pub type Reply = Result<Value, String>;

fn reply(r: Reply) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

fn msg(e: latfield::Error) -> String {
    e.to_string()
}

/// Point symmetry, lattice stability and the Cauchy-Born elasticity of a registered model.
pub fn model_report(name: &str) -> Reply {
    let m = build_model(name, &Params::new()).map_err(msg)?;
    let sym = validate_symmetry(m.as_ref(), 32, 0);
    let stab = stability_constant(m.as_ref(), 48);
    let cb = cauchy_born(m.as_ref());
    Ok(json!({
        "model": m.name(),
        "dim": m.lattice().dim(),
        "ncomp": m.lattice().ncomp(),
        "even": m.is_even(),
        "symmetry_pass": sym.pass,
        "symmetry_max_residual": sym.max_residual,
        "c0": stab.c0,
        "legendre_hadamard_min": cb.legendre_hadamard_min(48),
        "elastic": cb.c,
    }))
}

/// Green's function differences G(n) - G(0), first component, on the window of a 2D model.
pub fn green_table(name: &str, supercell: usize, radius: f64) -> Reply {
    if !supercell.is_power_of_two() || !(16..=MAX_SUPERCELL).contains(&supercell) {
        return Err(format!("supercell must be a power of two in [16, {MAX_SUPERCELL}]"));
    }
    let m = build_model(name, &Params::new()).map_err(msg)?;
    if m.lattice().dim() != 2 {
        return Err("the demo plots two-dimensional models only".into());
    }
    let g = LatticeGreens::compute(m.as_ref(), radius, supercell).map_err(msg)?;
    let n = m.lattice().ncomp();
    let g0 = g.value(&[0, 0, 0]).map_err(msg)?[0];
    let mut points = Vec::new();
    for s in g.window().sites() {
        let x = m.lattice().position(s);
        points.push(json!([s[0], s[1], x[0], x[1], g.value(s).map_err(msg)?[0] - g0]));
    }
    Ok(json!({
        "model": m.name(),
        "ncomp": n,
        "supercell": supercell,
        "radius": radius,
        "extrapolation_error": g.extrapolation_error,
        "calibration": g.calibration,
        "points": points,
    }))
}

/// Relaxed vacancy in the triangular pair model; returns site positions and displacements.
pub fn vacancy_solve(augmented: bool, radius: f64) -> Reply {
    if !(4.0..=MAX_SOLVE_RADIUS).contains(&radius) {
        return Err(format!("radius must lie in [4, {MAX_SOLVE_RADIUS}]"));
    }
    let host = build_model("triangular-pair", &Params::new()).map_err(msg)?;
    let model = Arc::new(make_defect_model(host.clone(), &DefectSpec::vacancy()).map_err(msg)?);
    let pred = assemble_predictor(host.as_ref(), DefectKind::Point, 0, vec![], 1.0).map_err(msg)?;
    let opts = SolverOptions::default();
    let lat = host.lattice().clone();
    let (scheme, r_out, table) = if augmented {
        let r_out = opts.buffer_factor * radius;
        let rt = table_radius(&lat, r_out, 1);
        let l = (32.0 * rt).max(256.0) as usize;
        let g = LatticeGreens::compute(host.as_ref(), rt, l.next_power_of_two()).map_err(msg)?;
        (Scheme::Augmented { p: 1 }, Some(r_out), Some(GreenTable::build(&g, rt).map_err(msg)?))
    } else {
        (Scheme::Clamped, None, None)
    };
    let problem = Arc::new(CellProblem::new(model, &pred, radius, scheme, r_out, table.as_ref()).map_err(msg)?);
    let sol = problem.solve(&opts, None).map_err(msg)?;
    let sites: Vec<Value> = sol
        .window
        .sites()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let x = lat.position(s);
            json!([x[0], x[1], sol.v[2 * i], sol.v[2 * i + 1]])
        })
        .collect();
    Ok(json!({
        "scheme": if augmented { "augmented" } else { "clamped" },
        "radius": radius,
        "report": sol.report,
        "coefficients": sol.coeffs,
        "sites": sites,
    }))
}

#[wasm_bindgen(js_name = modelReport)]
pub fn model_report_js(name: &str) -> Result<String, JsError> {
    reply(model_report(name))
}

#[wasm_bindgen(js_name = greenTable)]
pub fn green_table_js(name: &str, supercell: usize, radius: f64) -> Result<String, JsError> {
    reply(green_table(name, supercell, radius))
}

#[wasm_bindgen(js_name = vacancySolve)]
pub fn vacancy_solve_js(augmented: bool, radius: f64) -> Result<String, JsError> {
    reply(vacancy_solve(augmented, radius))
}
