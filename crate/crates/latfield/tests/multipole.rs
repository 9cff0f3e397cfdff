use latfield::lattice::Lattice;
use latfield::multipole::{default_basis, fit_coefficients, multipole_moments, MultipoleCoeffs};
use proptest::prelude::*;

fn round_trip(lat: &Lattice, p: usize, seed_vals: &[f64]) -> f64 {
    let basis = default_basis(lat);
    let mut b = MultipoleCoeffs::zeros(lat, &basis, p);
    let flat: Vec<f64> = (0..b.len()).map(|i| seed_vals[i % seed_vals.len()] * (1.0 + i as f64 * 0.37).sin()).collect();
    b.set_flat(&flat);
    let moments = multipole_moments(&b, lat).unwrap();
    let back = fit_coefficients(&moments, lat, &basis).unwrap();
    let scale = flat.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    back.flat().iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn moment_coefficient_round_trip(p in 1usize..=4, vals in prop::collection::vec(-2.0f64..2.0, 1..12)) {
        for lat in [Lattice::square_nn(1), Lattice::triangular_nn(2), Lattice::square_nn(2)] {
            let err = round_trip(&lat, p, &vals);
            prop_assert!(err < 1e-10, "p = {} error {:e}", p, err);
        }
    }

    #[test]
    fn moment_coefficient_round_trip_3d(p in 1usize..=3, vals in prop::collection::vec(-2.0f64..2.0, 1..8)) {
        let err = round_trip(&Lattice::cubic_nn(1), p, &vals);
        prop_assert!(err < 1e-10, "p = {} error {:e}", p, err);
    }
}
