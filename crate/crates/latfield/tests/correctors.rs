use latfield::correctors::{apply_h_c, assemble_predictor, build_rhs_s, ContinuumField, DefectKind, ScrewSpec};
use latfield::potentials::{build_model, cauchy_born, Params};

fn residual_on_circle(name: &str, p: usize) -> f64 {
    let m = build_model(name, &Params::new()).unwrap();
    let spec = ScrewSpec::default();
    let stack = assemble_predictor(m.as_ref(), DefectKind::Screw(spec), p, vec![None; p + 1], 1.0).unwrap();
    let cb = cauchy_born(m.as_ref());
    let rhs = build_rhs_s(m.as_ref(), p, &stack).unwrap();
    let mut worst: f64 = 0.0;
    for &r in &[3.0, 7.0, 15.0] {
        for k in 0..7 {
            let th = 0.4 + k as f64 * 0.83;
            let x = [spec.core[0] + r * th.cos(), spec.core[1] + r * th.sin()];
            let lhs = apply_h_c(&cb, stack.correctors[p].as_ref(), &x).unwrap();
            let f = rhs.value(&x).unwrap();
            worst = worst.max((lhs - f).abs() / f.abs().max(1e-300).max(r.powi(-5)));
        }
    }
    worst
}

#[test]
fn second_corrector_solves_its_equation() {
    assert!(residual_on_circle("antiplane-sine", 2) < 1e-8);
}

#[test]
fn odd_model_correctors_solve_their_equations() {
    assert!(residual_on_circle("antiplane-cubic", 1) < 1e-8);
    assert!(residual_on_circle("antiplane-cubic", 2) < 1e-8);
}

#[test]
fn structural_zeros() {
    let even = build_model("antiplane-sine", &Params::new()).unwrap();
    let stack = assemble_predictor(even.as_ref(), DefectKind::Screw(ScrewSpec::default()), 1, vec![None, None], 1.0).unwrap();
    assert!(build_rhs_s(even.as_ref(), 0, &stack).unwrap().is_zero());
    assert!(build_rhs_s(even.as_ref(), 1, &stack).unwrap().is_zero());
    let cubic = build_model("cubic-sine", &Params::new()).unwrap();
    let point = assemble_predictor(cubic.as_ref(), DefectKind::Point, 1, vec![None, None], 1.0).unwrap();
    assert!(point.correctors.iter().all(|f| f.is_zero()));
    assert!(build_rhs_s(cubic.as_ref(), 1, &point).unwrap().is_zero());
}

#[test]
fn predictor_orders_above_two_are_rejected() {
    let m = build_model("antiplane-sine", &Params::new()).unwrap();
    assert!(assemble_predictor(m.as_ref(), DefectKind::Screw(ScrewSpec::default()), 3, vec![], 1.0).is_err());
}
