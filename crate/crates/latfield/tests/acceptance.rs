//! Acceptance criteria, one PASS/FAIL line each. Criteria that fail are reported,
//! not hidden; set ACCEPTANCE_STRICT=1 to turn any failure into a nonzero exit.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use latfield::analysis::power_fit;
use latfield::correctors::{
    apply_h_sg, assemble_predictor, build_rhs_s, screw_force_identity, ContinuumField, DefectKind, ScrewSpec,
};
use latfield::cli::inverse_series_error;
use latfield::fourier::MultiplierSeries;
use latfield::greens::{green_decay_report, LatticeGreens};
use latfield::kernels::{expansion_error_table, morrey_direct, KernelSet};
use latfield::lattice::Lattice;
use latfield::multipole::{default_basis, fit_coefficients, multipole_moments, MultipoleCoeffs};
use latfield::potentials::{build_model, make_defect_model, DefectModel, DefectSpec, Params, SitePotential};
use latfield::solver::{
    decay_report, moment_fit, table_radius, CellProblem, GreenTable, Scheme, SolverOptions, StudyContext,
};
use latfield::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    passed: usize,
    failed: usize,
}

impl Report {
    fn line(&mut self, id: &str, ok: bool, detail: String) {
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
        println!("[{}] {id}: {detail}", if ok { "PASS" } else { "FAIL" });
    }

    fn info(&self, id: &str, detail: String) {
        println!("[INFO] {id}: {detail}");
    }

    /// Runs a check; an error inside it counts as a failure of that criterion.
    fn check(&mut self, id: &str, f: impl FnOnce(&mut Report) -> Result<()>) {
        let t = Instant::now();
        if let Err(e) = f(self) {
            self.line(id, false, format!("error: {e}"));
        }
        self.info(id, format!("runtime {:.1} s", t.elapsed().as_secs_f64()));
    }
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn model(name: &str) -> Arc<dyn SitePotential> {
    build_model(name, &Params::new()).expect("registered model")
}

fn c1_defining_property(r: &mut Report) -> Result<()> {
    let t = Instant::now();
    let m = model("antiplane-sine");
    let g = LatticeGreens::compute(m.as_ref(), 64.0, 1024)?;
    let res = g.defining_residual(&MultiplierSeries::new(m.as_ref()), 0, 32.0)?;
    let secs = t.elapsed().as_secs_f64();
    r.line(
        "C1 green-defining-property",
        res < 1e-6 && secs < 60.0,
        format!("max |H[G e1] - e1 delta0| on |l|<=32 = {res:.3e} (< 1e-6), {secs:.1} s (< 60 s)"),
    );
    Ok(())
}

fn c2_known_values(r: &mut Report) -> Result<()> {
    let m = model("antiplane-sine");
    let g = LatticeGreens::compute(m.as_ref(), 64.0, 1024)?;
    let g0 = g.value(&[0, 0, 0])?[0];
    let d1 = g.value(&[1, 0, 0])?[0] - g0;
    let d11 = g.value(&[1, 1, 0])?[0] - g0;
    r.line("C2a G(e1)-G(0)", within(d1, -0.25, 1e-6), format!("{d1} vs -0.25 +- 1e-6"));
    r.line("C2b G(1,1)-G(0)", within(d11, -1.0 / PI, 1e-5), format!("{d11} vs -1/pi = {} +- 1e-5", -1.0 / PI));
    Ok(())
}

fn c3_c4_decay_and_expansion(r: &mut Report) -> Result<()> {
    let t = Instant::now();
    let m = model("antiplane-sine");
    let g = LatticeGreens::compute(m.as_ref(), 128.0, 2048)?;
    r.info("C3 setup", format!("window 128, L = 2048, extrapolation error {:.2e}", g.extrapolation_error));
    let d1 = green_decay_report(&g, 1, 16.0, 128.0)?.fit.expect("j = 1 fit");
    let d2 = green_decay_report(&g, 2, 16.0, 128.0)?.fit.expect("j = 2 fit");
    r.line("C3a |DG| slope", within(d1.slope, -1.0, 0.1), format!("{:.4} (ci95 {:.3}) vs -1 +- 0.1 on [16,128]", d1.slope, d1.ci95));
    r.line("C3b |D2G| slope", within(d2.slope, -2.0, 0.15), format!("{:.4} (ci95 {:.3}) vs -2 +- 0.15 on [16,128]", d2.slope, d2.ci95));

    let ms = MultiplierSeries::new(m.as_ref());
    let ks = KernelSet::build(&ms, m.lattice().c_vol(), 1)?;
    let e00 = expansion_error_table(&g, &ks, 0, 0, 16.0, 128.0)?.fit;
    let e10 = expansion_error_table(&g, &ks, 1, 0, 16.0, 128.0)?.fit;
    let e01 = expansion_error_table(&g, &ks, 0, 1, 16.0, 128.0)?.fit;
    r.line("C4a |G - G0| slope", within(e00.slope, -2.0, 0.2), format!("{:.4} vs -2 +- 0.2", e00.slope));
    r.line("C4b |G - G0 - G1| slope", within(e10.slope, -4.0, 0.3), format!("{:.4} vs -4 +- 0.3", e10.slope));
    r.line("C4c |D(G - G0)| slope", within(e01.slope, -3.0, 0.3), format!("{:.4} vs -3 +- 0.3", e01.slope));
    // direct sphere quadrature of G0 against the modal evaluation
    let mut gap: f64 = 0.0;
    for x in [[2.3, 1.1], [-7.0, 3.5], [15.0, -22.0]] {
        let modal = ks.get(0)?.eval(&x, 1)?;
        let direct = morrey_direct(&ms, m.lattice().c_vol(), &x, 1, 1024)?;
        gap = gap.max(modal.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let secs = t.elapsed().as_secs_f64();
    r.line("C4d quadrature cross-check and runtime", gap < 1e-10 && secs < 300.0, format!("max |grad G0 modal - direct| {gap:.2e}, {secs:.1} s (< 300 s)"));
    Ok(())
}

fn c5_inverse_series(r: &mut Report) -> Result<()> {
    // For p = 2 the remainder reaches the double-precision floor (about 1e-12,
    // rounding of partial sums of size |k|^-2) below |k| = 0.08, so its fit window sits higher.
    let rays = |lo: f64, hi: f64| -> Vec<f64> { (0..9).map(|i| hi * (lo / hi).powf(i as f64 / 8.0)).collect() };
    for name in ["antiplane-sine", "triangular-pair"] {
        let ms = MultiplierSeries::new(model(name).as_ref());
        for (p, lo, hi) in [(0, 0.02, 0.2), (1, 0.02, 0.2), (2, 0.1, 0.5)] {
            let ts = rays(lo, hi);
            let errs = ts.iter().map(|&t| inverse_series_error(&ms, p, t)).collect::<Result<Vec<_>>>()?;
            let fit = power_fit(&ts, &errs, 0.0);
            let target = 2.0 * p as f64 + 2.0;
            r.line(
                &format!("C5 inverse series {name} p={p}"),
                within(fit.slope, target, 0.1),
                format!("slope {:.4} vs {target} +- 0.1 for |k| in [{lo}, {hi}]", fit.slope),
            );
        }
    }
    Ok(())
}

/// Triangular vacancy reference shared by criteria 6 and 8.
fn vacancy_context(r: &Report) -> Result<StudyContext> {
    let host = model("triangular-pair");
    let defect = Arc::new(make_defect_model(host.clone(), &DefectSpec::vacancy())?);
    let pred = Arc::new(assemble_predictor(host.as_ref(), DefectKind::Point, 0, vec![], 1.0)?);
    let t = Instant::now();
    let g = LatticeGreens::compute(host.as_ref(), 64.0, 2048)?;
    let ctx = StudyContext::new(defect, pred, Some(&g), 192.0, &SolverOptions::default())?;
    r.info(
        "vacancy reference",
        format!(
            "R = 192, R_out = {}, |grad| = {:.2e}, b1 = {:?}, {:.1} s",
            ctx.reference.report.r_out,
            ctx.reference.report.gradient_norm,
            ctx.reference.report.multipole_dofs,
            t.elapsed().as_secs_f64()
        ),
    );
    Ok(ctx)
}

fn c6_vacancy_far_field(r: &mut Report, ctx: &StudyContext) -> Result<()> {
    let field = ctx.reference.field();
    let raw = decay_report(&ctx.model, &field, 8.0, 96.0, 0.0)?;
    r.line("C6a |Du| slope", within(raw.slope, -2.0, 0.15), format!("{:.4} (ci95 {:.3}) vs -2 +- 0.15 on [8,96]", raw.slope, raw.ci95));
    let b = moment_fit(&ctx.model, &field, 48.0, 2)?;
    let table = ctx.table.as_ref().expect("reference table");
    let rem = ctx.reference.minus_multipole(&b, table)?;
    let fit = decay_report(&ctx.model, &rem, 8.0, 96.0, 0.0)?;
    r.line("C6b |D(u - multipole)| slope", fit.slope <= -2.7, format!("{:.4} (ci95 {:.3}) vs <= -2.7 on [8,96]", fit.slope, fit.ci95));
    r.info("C6 moments", format!("fitted dipole {:?}", b.coeffs[1].iter().map(|t| t.to_full()).collect::<Vec<_>>()));
    Ok(())
}

fn c7_screw(r: &mut Report) -> Result<()> {
    let host = model("antiplane-sine");
    let spec = ScrewSpec::default();
    let defect = Arc::new(DefectModel::homogeneous(host.clone()));
    let pred = Arc::new(assemble_predictor(host.as_ref(), DefectKind::Screw(spec), 0, vec![], 1.0)?);
    let g = LatticeGreens::compute(host.as_ref(), 64.0, 1024)?;
    let opts = SolverOptions::default();
    let ctx = StudyContext::new(defect.clone(), pred, Some(&g), 192.0, &opts)?;
    let field = ctx.reference.field();
    let q1 = decay_report(&defect, &field, 8.0, 96.0, 1.0)?;
    r.line(
        "C7a |D(u - u_CLE)| slope, one log deflated",
        within(q1.slope, -2.0, 0.2),
        format!("{:.4} (ci95 {:.3}) vs -2 +- 0.2 on [8,96]", q1.slope, q1.ci95),
    );
    let raw = decay_report(&defect, &field, 8.0, 96.0, 0.0)?;
    r.info("C7a undeflated", format!("slope {:.4} (ci95 {:.3}) on [8,96]", raw.slope, raw.ci95));
    let id = screw_force_identity(host.as_ref(), &spec, 1.0, 64.0)?;
    r.line(
        "C7b force identity at radius 64",
        id.relative_gap < 1e-3,
        format!(
            "contour {}, sum first variation {}, sum linearised {}, relative gap {:.2e} (< 1e-3)",
            id.contour, id.sum_first_variation, id.sum_linearised, id.relative_gap
        ),
    );
    let radii = [8.0, 16.0, 24.0, 32.0, 48.0, 64.0];
    let clamped = ctx.study(Scheme::Clamped, &radii, 0.0, &opts)?;
    let aug = ctx.study(Scheme::Augmented { p: 1 }, &radii, 0.0, &opts)?;
    let deflated = power_fit(&radii, &clamped.errors, 1.0);
    r.info("screw clamped study", format!("slope {:.4}, one log deflated {:.4}", clamped.fit.slope, deflated.slope));
    r.info("screw augmented p=1 study", format!("slope {:.4}", aug.fit.slope));
    Ok(())
}

fn c8_cell_rates(r: &mut Report, ctx: &StudyContext) -> Result<()> {
    let t = Instant::now();
    let radii = [8.0, 16.0, 24.0, 32.0, 48.0, 64.0];
    let opts = SolverOptions::default();
    let clamped = ctx.study(Scheme::Clamped, &radii, 0.0, &opts)?;
    let aug = ctx.study(Scheme::Augmented { p: 1 }, &radii, 0.0, &opts)?;
    r.line("C8a clamped slope", within(clamped.fit.slope, -1.0, 0.2), format!("{:.4} vs -1 +- 0.2, errors {}", clamped.fit.slope, sci(&clamped.errors)));
    r.line("C8b augmented p=1 slope", within(aug.fit.slope, -2.0, 0.3), format!("{:.4} vs -2 +- 0.3, errors {}", aug.fit.slope, sci(&aug.errors)));
    let below = clamped.errors.iter().zip(&aug.errors).all(|(c, a)| a <= c);
    let secs = t.elapsed().as_secs_f64();
    r.line("C8c augmented <= clamped at every R", below, format!("{below}"));
    r.line("C8d study runtime", secs < 600.0, format!("{secs:.1} s (< 600 s, excluding the shared reference)"));
    Ok(())
}

fn c9_gradients(r: &mut Report) -> Result<()> {
    for name in ["antiplane-sine", "triangular-pair"] {
        let host = model(name);
        let (defect, kind) = if name == "antiplane-sine" {
            (DefectModel::homogeneous(host.clone()), DefectKind::Screw(ScrewSpec::default()))
        } else {
            (make_defect_model(host.clone(), &DefectSpec::vacancy())?, DefectKind::Point)
        };
        let pred = assemble_predictor(host.as_ref(), kind, 0, vec![], 1.0)?;
        let g = LatticeGreens::compute(host.as_ref(), 16.0, 256)?;
        let table = GreenTable::build(&g, table_radius(host.lattice(), 12.0, 1))?;
        let problem = CellProblem::new(Arc::new(defect), &pred, 6.0, Scheme::Augmented { p: 1 }, Some(12.0), Some(&table))?;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let x: Vec<f64> = (0..problem.n_dofs()).map(|_| rng.random_range(-0.05..0.05)).collect();
        let (_, grad) = problem.energy_and_gradient(&x)?;
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let d: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = 1e-5;
            let shift = |s: f64| x.iter().zip(&d).map(|(a, b)| a + s * b).collect::<Vec<_>>();
            let fd = (problem.energy_and_gradient(&shift(h))?.0 - problem.energy_and_gradient(&shift(-h))?.0) / (2.0 * h);
            let an: f64 = grad.iter().zip(&d).map(|(a, b)| a * b).sum();
            worst = worst.max((fd - an).abs() / an.abs());
        }
        r.line(&format!("C9 gradient vs central differences ({name})"), worst < 1e-6, format!("max relative error {worst:.2e} over 20 directions (< 1e-6)"));
    }
    Ok(())
}

/// x₁⁴ in two dimensions.
struct QuarticField;

impl ContinuumField for QuarticField {
    fn dim(&self) -> usize {
        2
    }
    fn jet_order(&self) -> usize {
        4
    }
    fn jet(&self, x: &[f64], order: usize) -> Result<Vec<Vec<f64>>> {
        let x1 = x[0];
        let derivs = [x1.powi(4), 4.0 * x1.powi(3), 12.0 * x1 * x1, 24.0 * x1, 24.0];
        Ok((0..=order)
            .map(|j| {
                let mut t = vec![0.0; 2usize.pow(j as u32)];
                t[0] = derivs[j];
                t
            })
            .collect())
    }
}

fn c10_structure(r: &mut Report) -> Result<()> {
    let even = model("antiplane-sine");
    let stack = assemble_predictor(even.as_ref(), DefectKind::Screw(ScrewSpec::default()), 1, vec![None, None], 1.0)?;
    r.line("C10a S0 = 0", build_rhs_s(even.as_ref(), 0, &stack)?.is_zero(), "antiplane-sine screw".into());
    r.line("C10b S1 = 0 for the even model", build_rhs_s(even.as_ref(), 1, &stack)?.is_zero(), "antiplane-sine screw".into());
    let cubic = model("cubic-sine");
    let point = assemble_predictor(cubic.as_ref(), DefectKind::Point, 1, vec![None, None], 1.0)?;
    r.line("C10c d=3 S1 = 0", build_rhs_s(cubic.as_ref(), 1, &point)?.is_zero(), "cubic-sine point defect".into());
    let unit = model("antiplane-quadratic");
    let hsg = apply_h_sg(unit.as_ref(), &QuarticField, &[0.37, -1.4])?;
    r.line("C10d H_SG[x1^4]", within(hsg, -2.0, 1e-12), format!("{hsg} vs -2"));
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for lat in [Lattice::square_nn(1), Lattice::triangular_nn(2), Lattice::cubic_nn(1)] {
        let basis = default_basis(&lat);
        for p in 1..=4 {
            let mut b = MultipoleCoeffs::zeros(&lat, &basis, p);
            let flat: Vec<f64> = (0..b.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            b.set_flat(&flat);
            let back = fit_coefficients(&multipole_moments(&b, &lat)?, &lat, &basis)?;
            worst = worst.max(back.flat().iter().zip(&flat).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max));
        }
    }
    r.line("C10e moment/coefficient round trip", worst < 1e-10, format!("max error {worst:.2e} for orders <= 3 (< 1e-10)"));
    Ok(())
}

fn main() {
    let start = Instant::now();
    let mut r = Report { passed: 0, failed: 0 };
    r.check("C1", c1_defining_property);
    r.check("C2", c2_known_values);
    r.check("C3/C4", c3_c4_decay_and_expansion);
    r.check("C5", c5_inverse_series);
    match vacancy_context(&r) {
        Ok(ctx) => {
            let t = Instant::now();
            r.check("C6", |r| c6_vacancy_far_field(r, &ctx));
            r.check("C8", |r| c8_cell_rates(r, &ctx));
            r.info("C6/C8", format!("{:.1} s after the reference", t.elapsed().as_secs_f64()));
        }
        Err(e) => r.line("C6/C8 vacancy reference", false, format!("error: {e}")),
    }
    r.check("C7", c7_screw);
    r.check("C9", c9_gradients);
    r.check("C10", c10_structure);
    println!(
        "acceptance: {} passed, {} failed, {:.1} s",
        r.passed,
        r.failed,
        start.elapsed().as_secs_f64()
    );
    if r.failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" ")
}
