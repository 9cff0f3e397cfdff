//! Continuum kernels Gₙ of the lattice Green's function expansion.
//!
//! In two dimensions each kernel is the inverse Fourier transform of a
//! homogeneous symbol 𝒜_{2n−2}. Expanding the symbol in angular modes turns the
//! sphere integral into a closed form per mode, so kernels become finite polar
//! series with exact derivatives. A direct trapezoid evaluation of the same
//! integral is kept as a cross-check.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::analysis::{shell_fit, ShellFit};
use crate::error::{Error, Result};
use crate::fourier::MultiplierSeries;
use crate::greens::LatticeGreens;
use crate::lattice::{add, Lattice, Site};
use crate::polar::{PolarJet, PolarSeries, PolarTerm};

/// J_l(w): l!(−iw)^{−l−1} for l ≥ 0, and (iw)^{−l−1}(−log(−iw) + H_{−l−1})/(−l−1)! for l < 0.
pub fn j_function(l: i32, w: f64) -> Result<Complex64> {
    let i = Complex64::new(0.0, 1.0);
    if l >= 0 {
        if w == 0.0 {
            return Err(Error::SingularArgument(l));
        }
        let fact: f64 = (1..=l).map(|k| k as f64).product();
        Ok((-i * w).powi(-l - 1) * fact)
    } else {
        let m = (-l - 1) as u32;
        let fact: f64 = (1..=m).map(|k| k as f64).product();
        let harmonic: f64 = (1..=m).map(|k| 1.0 / k as f64).sum();
        if w == 0.0 {
            if m == 0 {
                return Err(Error::SingularArgument(l));
            }
            return Ok(Complex64::new(0.0, 0.0));
        }
        let z = -i * w;
        Ok((i * w).powi(m as i32) * (-z.ln() + harmonic) / fact)
    }
}

/// Fourier coefficients a_m of θ ↦ 𝒜_{2n−2}(cos θ, sin θ), one vector per matrix entry.
#[derive(Debug, Clone, Serialize)]
pub struct AngularModes {
    pub nodes: usize,
    /// `coef[entry][m + nodes/2]` for m in −nodes/2..nodes/2.
    pub coef: Vec<Vec<(f64, f64)>>,
    pub change: f64,
}

fn sample_modes(ms: &MultiplierSeries, n: i32, nodes: usize) -> Result<Vec<Vec<Complex64>>> {
    let nn = ms.ncomp();
    let mut data = vec![vec![Complex64::new(0.0, 0.0); nodes]; nn * nn];
    for t in 0..nodes {
        let th = 2.0 * PI * t as f64 / nodes as f64;
        let a = ms.inverse_series_term(n - 1, &[th.cos(), th.sin()])?;
        for e in 0..nn * nn {
            data[e][t] = Complex64::new(a[e], 0.0);
        }
    }
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(nodes);
    for row in data.iter_mut() {
        fft.process(row);
        for x in row.iter_mut() {
            *x /= nodes as f64;
        }
    }
    Ok(data)
}

fn mode_at(row: &[Complex64], m: i64) -> Complex64 {
    let n = row.len() as i64;
    row[m.rem_euclid(n) as usize]
}

/// Angular modes with node doubling until coefficients stop changing.
pub fn angular_modes(ms: &MultiplierSeries, n: i32, tol: f64) -> Result<AngularModes> {
    let mut nodes = 32usize;
    let mut prev = sample_modes(ms, n, nodes)?;
    loop {
        let next_nodes = nodes * 2;
        if next_nodes > 1 << 14 {
            let change = modal_change(&prev, &sample_modes(ms, n, nodes)?, nodes);
            return Err(Error::QuadratureNotConverged(change));
        }
        let next = sample_modes(ms, n, next_nodes)?;
        let change = modal_change(&prev, &next, nodes);
        if change < tol {
            let half = next_nodes as i64 / 2;
            let coef = next
                .iter()
                .map(|row| {
                    (-half..half)
                        .map(|m| {
                            let c = mode_at(row, m);
                            (c.re, c.im)
                        })
                        .collect()
                })
                .collect();
            return Ok(AngularModes { nodes: next_nodes, coef, change });
        }
        prev = next;
        nodes = next_nodes;
    }
}

fn modal_change(a: &[Vec<Complex64>], b: &[Vec<Complex64>], nodes: usize) -> f64 {
    let half = nodes as i64 / 2;
    let mut scale: f64 = 0.0;
    let mut diff: f64 = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        for m in -half..half {
            let (x, y) = (mode_at(ra, m), mode_at(rb, m));
            scale = scale.max(y.norm());
            diff = diff.max((x - y).norm());
        }
        // modes only the finer grid resolves
        for m in half..(rb.len() as i64 / 2) {
            diff = diff.max(mode_at(rb, m).norm()).max(mode_at(rb, -m).norm());
        }
    }
    diff / scale.max(1e-300)
}

/// Γ(a)/Γ(b) for half-integer or integer arguments with a − b a non-negative integer;
/// zero when b is a non-positive integer.
fn gamma_ratio(a: f64, b: f64) -> f64 {
    if b <= 0.0 && b.fract() == 0.0 {
        return 0.0;
    }
    let steps = (a - b).round() as i64;
    let mut r = 1.0;
    for k in 0..steps {
        r *= b + k as f64;
    }
    r
}

#[derive(Debug, Clone)]
pub struct ContinuumKernel {
    pub order: usize,
    pub dim: usize,
    pub ncomp: usize,
    /// Coefficient of log|x| (n = 0, d = 2), N×N.
    pub log_part: Option<Vec<f64>>,
    pub nodes: usize,
    series: Vec<PolarSeries>,
    jets: Vec<PolarJet>,
    /// d = 3 only: ms and c_vol for the great-circle formula.
    d3: Option<(MultiplierSeries, f64)>,
}

pub const DEFAULT_JET_ORDER: usize = 4;

impl ContinuumKernel {
    /// Build Gₙ for the given multiplier; `jet_order` is the highest derivative served.
    pub fn build(ms: &MultiplierSeries, c_vol: f64, n: usize, jet_order: usize) -> Result<Self> {
        let nn = ms.ncomp();
        if ms.dim() == 3 {
            if n != 0 {
                return Err(Error::Unsupported("three-dimensional kernels beyond G0".into()));
            }
            return Ok(ContinuumKernel {
                order: 0,
                dim: 3,
                ncomp: nn,
                log_part: None,
                nodes: 0,
                series: Vec::new(),
                jets: Vec::new(),
                d3: Some((ms.clone(), c_vol)),
            });
        }
        if ms.dim() != 2 {
            return Err(Error::Unsupported(format!("dimension {}", ms.dim())));
        }
        let modes = angular_modes(ms, n as i32, 1e-13)?;
        let half = modes.nodes as i64 / 2;
        let i = Complex64::new(0.0, 1.0);
        let nf = n as f64;
        let mut series = Vec::with_capacity(nn * nn);
        let mut log_part = vec![0.0; nn * nn];
        for (e, row) in modes.coef.iter().enumerate() {
            let scale = row.iter().fold(0.0f64, |s, c| s.max(c.0.hypot(c.1)));
            let mut terms = Vec::new();
            for m in -half..half {
                let (re, im) = row[(m + half) as usize];
                let a = Complex64::new(re, im);
                if a.norm() <= 1e-15 * scale {
                    continue;
                }
                let am = m.unsigned_abs() as f64;
                let ipow = i.powi(m.unsigned_abs() as i32);
                if n == 0 {
                    if m == 0 {
                        let c = -c_vol * a.re / (2.0 * PI);
                        log_part[e] = c;
                        terms.push(PolarTerm::new(Complex64::new(c, 0.0), 0.0, 0, 1));
                        terms.push(PolarTerm::new(Complex64::new(-c * 2f64.ln(), 0.0), 0.0, 0, 0));
                    } else {
                        let g = a * ipow * (c_vol / (2.0 * PI * am));
                        terms.push(PolarTerm::new(g, 0.0, m as i32, 0));
                    }
                } else {
                    let ratio = gamma_ratio((am + 2.0 * nf) / 2.0, (am - 2.0 * nf + 2.0) / 2.0);
                    if ratio == 0.0 {
                        continue;
                    }
                    let g = a * ipow * (c_vol / (2.0 * PI) * 2f64.powi(2 * n as i32 - 1) * ratio);
                    terms.push(PolarTerm::new(g, -2.0 * nf, m as i32, 0));
                }
            }
            series.push(PolarSeries::new(terms));
        }
        let jets = series.iter().map(|s| PolarJet::new(s, jet_order)).collect();
        Ok(ContinuumKernel {
            order: n,
            dim: 2,
            ncomp: nn,
            log_part: (n == 0).then_some(log_part),
            nodes: modes.nodes,
            series,
            jets,
            d3: None,
        })
    }

    /// Homogeneity degree 2 − 2n − d.
    pub fn degree(&self) -> i32 {
        2 - 2 * self.order as i32 - self.dim as i32
    }

    /// ∇ʲGₙ(x), layout `[(i * N + k) * d^j + slot]`.
    pub fn eval(&self, x: &[f64], j: usize) -> Result<Vec<f64>> {
        let r: f64 = x[..self.dim].iter().map(|v| v * v).sum::<f64>().sqrt();
        if r == 0.0 {
            return Err(Error::SingularArgument(-1));
        }
        if let Some((ms, cv)) = &self.d3 {
            if j > 0 {
                return Err(Error::Unsupported("derivatives of three-dimensional kernels".into()));
            }
            return great_circle_g0(ms, *cv, x);
        }
        let jets = self.jets.first().map(|jt| jt.order()).unwrap_or(0);
        if j > jets {
            return Err(Error::UnsupportedOrder(j));
        }
        let mut out = Vec::with_capacity(self.jets.len() << j);
        for jet in &self.jets {
            out.extend(jet.tensor(j, x[0], x[1]));
        }
        Ok(out)
    }

    /// Largest imaginary residue of the mode sums at x (should vanish).
    pub fn imaginary_residue(&self, x: &[f64]) -> f64 {
        self.series.iter().map(|s| s.eval_complex(x[0], x[1]).im.abs()).fold(0.0, f64::max)
    }

    pub fn entry_series(&self, e: usize) -> &PolarSeries {
        &self.series[e]
    }
}

fn great_circle_g0(ms: &MultiplierSeries, c_vol: f64, x: &[f64]) -> Result<Vec<f64>> {
    let nn = ms.ncomp();
    let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    let u = [x[0] / r, x[1] / r, x[2] / r];
    // orthonormal pair perpendicular to u
    let helper = if u[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let dot: f64 = (0..3).map(|a| helper[a] * u[a]).sum();
    let mut e1 = [0.0; 3];
    for a in 0..3 {
        e1[a] = helper[a] - dot * u[a];
    }
    let n1 = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    for v in e1.iter_mut() {
        *v /= n1;
    }
    let e2 = [u[1] * e1[2] - u[2] * e1[1], u[2] * e1[0] - u[0] * e1[2], u[0] * e1[1] - u[1] * e1[0]];
    let ring = |m: usize| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; nn * nn];
        for t in 0..m {
            let th = 2.0 * PI * t as f64 / m as f64;
            let (s, c) = th.sin_cos();
            let sig = [c * e1[0] + s * e2[0], c * e1[1] + s * e2[1], c * e1[2] + s * e2[2]];
            let a = ms.inverse_series_term(-1, &sig)?;
            for (o, v) in acc.iter_mut().zip(a) {
                *o += v * 2.0 * PI / m as f64;
            }
        }
        Ok(acc)
    };
    let mut m = 32;
    let mut prev = ring(m)?;
    loop {
        m *= 2;
        let next = ring(m)?;
        let scale = next.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        let change = next.iter().zip(&prev).fold(0.0f64, |s, (a, b)| s.max((a - b).abs()));
        if change <= 1e-13 * scale {
            return Ok(next.iter().map(|v| v * c_vol / (8.0 * PI * PI * r)).collect());
        }
        if m >= 1 << 14 {
            return Err(Error::QuadratureNotConverged(change / scale));
        }
        prev = next;
    }
}

/// Direct trapezoid evaluation of G₀ (j = 0) or ∇G₀ (j = 1) in d = 2 from the
/// sphere integral, with nodes placed symmetrically about the singular angles.
pub fn morrey_direct(ms: &MultiplierSeries, c_vol: f64, x: &[f64], j: usize, nodes: usize) -> Result<Vec<f64>> {
    let nn = ms.ncomp();
    let phi = x[1].atan2(x[0]);
    let i = Complex64::new(0.0, 1.0);
    let mut out = vec![0.0; nn * nn * if j == 0 { 1 } else { 2 }];
    let h = 2.0 * PI / nodes as f64;
    for t in 0..nodes {
        let th = phi + 0.5 * PI + (t as f64 + 0.5) * h;
        let sig = [th.cos(), th.sin()];
        let w = x[0] * sig[0] + x[1] * sig[1];
        let a = ms.inverse_series_term(-1, &sig)?;
        match j {
            0 => {
                let jv = j_function(-1, w)?;
                for e in 0..nn * nn {
                    out[e] += a[e] * jv.re * h;
                }
            }
            1 => {
                let jv = j_function(0, w)?;
                for e in 0..nn * nn {
                    for c in 0..2 {
                        out[e * 2 + c] += a[e] * (i * sig[c] * jv).re * h;
                    }
                }
            }
            _ => return Err(Error::UnsupportedOrder(j)),
        }
    }
    if j == 0 {
        // midpoint rule on a log singularity undershoots by h·log 2 per singular angle
        let sig = [-phi.sin(), phi.cos()];
        let a = ms.inverse_series_term(-1, &sig)?;
        for e in 0..nn * nn {
            out[e] += 2.0 * h * std::f64::consts::LN_2 * a[e];
        }
    }
    let pref = c_vol / (4.0 * PI * PI);
    Ok(out.iter().map(|v| v * pref).collect())
}

/// Kernel set G₀..G_p for a model.
pub struct KernelSet {
    pub kernels: Vec<ContinuumKernel>,
}

impl KernelSet {
    pub fn build(ms: &MultiplierSeries, c_vol: f64, p: usize) -> Result<Self> {
        let kernels = (0..=p).map(|n| ContinuumKernel::build(ms, c_vol, n, DEFAULT_JET_ORDER)).collect::<Result<_>>()?;
        Ok(KernelSet { kernels })
    }

    pub fn get(&self, n: usize) -> Result<&ContinuumKernel> {
        self.kernels.get(n).ok_or(Error::KernelOrderMissing(n))
    }

    /// Σ_{n≤p} Gₙ(x), N×N.
    pub fn partial_sum(&self, x: &[f64], p: usize) -> Result<Vec<f64>> {
        let mut acc: Option<Vec<f64>> = None;
        for n in 0..=p {
            let v = self.get(n)?.eval(x, 0)?;
            acc = Some(match acc {
                None => v,
                Some(a) => a.iter().zip(v).map(|(x, y)| x + y).collect(),
            });
        }
        Ok(acc.unwrap())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionTable {
    pub p: usize,
    pub j: usize,
    pub fit: ShellFit,
}

/// Shell-max of |Dʲ𝒢(ℓ) − Σ_{n≤p} DʲGₙ(ℓ)| over all stencil-direction tuples.
pub fn expansion_error_table(
    g: &LatticeGreens,
    kernels: &KernelSet,
    p: usize,
    j: usize,
    r_min: f64,
    r_max: f64,
) -> Result<ExpansionTable> {
    let lat = g.lattice();
    let nn = lat.ncomp();
    let tuples = direction_tuples(lat, j);
    let mut samples = Vec::new();
    for s in g.window().sites() {
        let r = lat.norm(s);
        if r < r_min || r > r_max {
            continue;
        }
        let mut worst: f64 = 0.0;
        let mut ok = true;
        for tup in &tuples {
            let mut acc = vec![0.0; nn * nn];
            for mask in 0u32..(1 << tup.len()) {
                let mut q = *s;
                for (t, d) in tup.iter().enumerate() {
                    if mask & (1 << t) != 0 {
                        q = add(&q, d);
                    }
                }
                let sign = if (tup.len() - mask.count_ones() as usize).is_multiple_of(2) { 1.0 } else { -1.0 };
                let lv = match g.value(&q) {
                    Ok(v) => v,
                    Err(_) => {
                        ok = false;
                        break;
                    }
                };
                let x = lat.position(&q);
                let kv = kernels.partial_sum(&x[..lat.dim()], p)?;
                for e in 0..nn * nn {
                    acc[e] += sign * (lv[e] - kv[e]);
                }
            }
            if !ok {
                break;
            }
            worst = worst.max(acc.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        if ok {
            samples.push((r, worst));
        }
    }
    let fit = shell_fit(&samples, r_min, r_max, 0.0)?;
    Ok(ExpansionTable { p, j, fit })
}

/// All j-tuples of stencil directions.
pub fn direction_tuples(lat: &Lattice, j: usize) -> Vec<Vec<Site>> {
    let mut out = vec![Vec::new()];
    for _ in 0..j {
        let mut next = Vec::new();
        for t in &out {
            for rho in lat.stencil() {
                let mut u = t.clone();
                u.push(*rho);
                next.push(u);
            }
        }
        out = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{build_model, Params};

    fn antiplane() -> (MultiplierSeries, f64) {
        let m = build_model("antiplane-sine", &Params::new()).unwrap();
        (MultiplierSeries::new(m.as_ref()), 1.0)
    }

    #[test]
    fn j_values() {
        assert!((j_function(1, 1.0).unwrap() - Complex64::new(-1.0, 0.0)).norm() < 1e-15);
        assert!((j_function(-1, 1.0).unwrap() - Complex64::new(0.0, PI / 2.0)).norm() < 1e-15);
        let d = (j_function(0, 1.0001).unwrap() - j_function(0, 0.9999).unwrap()) / 0.0002;
        let rhs = Complex64::new(0.0, 1.0) * j_function(1, 1.0).unwrap();
        assert!((d - rhs).norm() < 1e-7);
        assert!(matches!(j_function(2, 0.0), Err(Error::SingularArgument(2))));
    }

    #[test]
    fn laplace_kernels() {
        let (ms, cv) = antiplane();
        let g0 = ContinuumKernel::build(&ms, cv, 0, 2).unwrap();
        let x = [1.7, -0.6];
        let r2 = x[0] * x[0] + x[1] * x[1];
        let grad = g0.eval(&x, 1).unwrap();
        assert!((grad[0] + x[0] / (2.0 * PI * r2)).abs() < 1e-14);
        assert!((grad[1] + x[1] / (2.0 * PI * r2)).abs() < 1e-14);
        let v = g0.eval(&x, 0).unwrap()[0];
        assert!((v + (r2.sqrt() / 2.0).ln() / (2.0 * PI)).abs() < 1e-14);
        let a = g0.log_part.as_ref().unwrap()[0];
        assert!((a + 1.0 / (2.0 * PI)).abs() < 1e-15);
        let g1 = ContinuumKernel::build(&ms, cv, 1, 2).unwrap();
        let phi = x[1].atan2(x[0]);
        let exact = (4.0 * phi).cos() / (24.0 * PI * r2);
        assert!((g1.eval(&x, 0).unwrap()[0] - exact).abs() < 1e-14);
        let y = [2.0 * x[0], 2.0 * x[1]];
        assert!((g1.eval(&y, 0).unwrap()[0] - 0.25 * g1.eval(&x, 0).unwrap()[0]).abs() < 1e-15);
    }

    #[test]
    fn direct_quadrature_agrees() {
        let m = build_model("triangular-pair", &Params::new()).unwrap();
        let ms = MultiplierSeries::new(m.as_ref());
        let cv = m.lattice().c_vol();
        let g0 = ContinuumKernel::build(&ms, cv, 0, 1).unwrap();
        let x = [2.3, 1.1];
        let modal = g0.eval(&x, 1).unwrap();
        let direct = morrey_direct(&ms, cv, &x, 1, 512).unwrap();
        for (a, b) in modal.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-10, "{a} {b}");
        }
        let modal = g0.eval(&x, 0).unwrap();
        let direct = morrey_direct(&ms, cv, &x, 0, 4096).unwrap();
        for (a, b) in modal.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-8, "{a} {b}");
        }
    }

    #[test]
    fn cubic_great_circle() {
        let m = build_model("cubic-sine", &Params::new()).unwrap();
        let ms = MultiplierSeries::new(m.as_ref());
        let g0 = ContinuumKernel::build(&ms, 1.0, 0, 0).unwrap();
        let x: [f64; 3] = [0.3, 1.2, -2.0];
        let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        assert!((g0.eval(&x, 0).unwrap()[0] - 1.0 / (4.0 * PI * r)).abs() < 1e-13);
    }
}
