use std::f64::consts::PI;

use latfield::fourier::MultiplierSeries;
use latfield::greens::LatticeGreens;
use latfield::potentials::{build_model, Params};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

fn model(name: &str) -> std::sync::Arc<dyn latfield::potentials::SitePotential> {
    build_model(name, &Params::new()).unwrap()
}

#[test]
fn square_lattice_potential_kernel_values() {
    let m = model("antiplane-sine");
    let g = LatticeGreens::compute(m.as_ref(), 32.0, 512).unwrap();
    let g0 = g.value(&[0, 0, 0]).unwrap()[0];
    let d = |s: [i64; 3]| g.value(&s).unwrap()[0] - g0;
    assert!((d([1, 0, 0]) + 0.25).abs() < 1e-8);
    assert!((d([1, 1, 0]) + 1.0 / PI).abs() < 1e-8);
    // a(2,0) = 4 − 8/π for the simple random walk; 𝒢 differences are −a/4
    assert!((d([2, 0, 0]) + (1.0 - 2.0 / PI)).abs() < 1e-8);
}

#[test]
fn calibration_constant_matches_closed_form() {
    let m = model("antiplane-sine");
    let g = LatticeGreens::compute(m.as_ref(), 48.0, 512).unwrap();
    let expected = (2.0 * EULER_GAMMA + 5.0 * 2f64.ln()) / (4.0 * PI);
    assert!((g.calibration.constant[0] - expected).abs() < 1e-6, "{:?}", g.calibration);
    assert!((g.value(&[0, 0, 0]).unwrap()[0] - expected).abs() < 1e-6);
}

#[test]
fn doubling_supercell_moves_values_below_tolerance() {
    for (name, r) in [("antiplane-sine", 32.0), ("triangular-pair", 32.0)] {
        let m = model(name);
        let a = LatticeGreens::compute(m.as_ref(), r, 512).unwrap();
        let b = LatticeGreens::compute(m.as_ref(), r, 1024).unwrap();
        let mut worst: f64 = 0.0;
        for s in a.window().sites() {
            for (x, y) in a.value(s).unwrap().iter().zip(b.value(s).unwrap()) {
                worst = worst.max((x - y).abs());
            }
        }
        assert!(worst < 1e-7, "{name}: {worst:e}");
    }
}

#[test]
fn symmetry_and_defining_property() {
    for (name, r, l) in [("antiplane-sine", 24.0, 512), ("triangular-pair", 24.0, 512), ("cubic-sine", 6.0, 64)] {
        let m = model(name);
        let g = LatticeGreens::compute(m.as_ref(), r, l).unwrap();
        assert!(g.symmetry_residual() < 1e-10, "{name}");
        let ms = MultiplierSeries::new(m.as_ref());
        for k in 0..m.lattice().ncomp() {
            assert!(g.defining_residual(&ms, k, r / 2.0).unwrap() < 1e-8, "{name} column {k}");
        }
    }
}

#[test]
fn calibration_residual_shrinks_with_window() {
    let m = model("triangular-pair");
    let res: Vec<f64> = [16.0, 32.0, 64.0]
        .iter()
        .map(|&r| LatticeGreens::compute(m.as_ref(), r, (16.0 * r) as usize).unwrap().calibration.residual)
        .collect();
    assert!(res[0] > res[1] && res[1] > res[2], "{res:?}");
}

#[test]
fn csv_round_trip_is_exact() {
    let m = model("triangular-pair");
    let g = LatticeGreens::compute(m.as_ref(), 12.0, 256).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("g.csv");
    g.write_csv(&path).unwrap();
    let h = LatticeGreens::read_csv(m.as_ref(), &path, 256, 12.0).unwrap();
    for s in g.window().sites() {
        assert_eq!(g.value(s).unwrap(), h.value(s).unwrap());
    }
}

#[test]
fn small_supercells_are_rejected() {
    let m = model("antiplane-sine");
    assert!(LatticeGreens::compute(m.as_ref(), 48.0, 256).is_err());
    assert!(LatticeGreens::compute(m.as_ref(), 16.0, 200).is_err());
}
