use latfield_web::{green_table, model_report, vacancy_solve};

#[test]
fn model_report_flags_asymmetric_model() {
    let ok = model_report("antiplane-sine").unwrap();
    assert_eq!(ok["symmetry_pass"], true);
    assert!((ok["c0"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(model_report("antiplane-cubic").unwrap()["symmetry_pass"], false);
    assert!(model_report("no-such-model").is_err());
}

#[test]
fn green_table_has_unit_nearest_neighbour_difference() {
    let r = green_table("antiplane-sine", 256, 12.0).unwrap();
    let pts = r["points"].as_array().unwrap();
    let e1 = pts.iter().find(|p| p[0] == 1 && p[1] == 0).unwrap();
    assert!((e1[4].as_f64().unwrap() + 0.25).abs() < 1e-6);
    assert!(green_table("antiplane-sine", 2048, 12.0).is_err());
    assert!(green_table("cubic-sine", 64, 4.0).is_err());
}

#[test]
fn vacancy_solves_converge() {
    for aug in [false, true] {
        let r = vacancy_solve(aug, 6.0).unwrap();
        assert_eq!(r["report"]["converged"], true, "{r}");
        assert!(!r["sites"].as_array().unwrap().is_empty());
    }
    assert!(vacancy_solve(false, 40.0).is_err());
}
