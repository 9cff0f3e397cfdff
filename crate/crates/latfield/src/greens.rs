//! Lattice Green's function on a window of sites.
//!
//! Differences 𝒢(ℓ) − 𝒢(0) come from the discrete inverse of the multiplier on
//! a periodic L^d wave-vector grid with the k = 0 mode removed. Only the window
//! rows and columns of the transform are kept. The periodic-image error is
//! removed by Richardson extrapolation between L and 2L, and a third grid L/2
//! estimates what is left. The additive constant is fixed by matching the
//! continuum asymptote on the outer part of the window.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::analysis::{log_growth, shell_fit, LogGrowth, ShellFit};
use crate::error::{Error, Result};
use crate::fourier::{inverse, MultiplierSeries};
use crate::kernels::{direction_tuples, KernelSet};
use crate::lattice::{add, Lattice, Site, Window};
use crate::potentials::{stability_constant, SitePotential};

pub const RICHARDSON_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Calibration {
    /// Additive constant per matrix entry (N×N).
    pub constant: Vec<f64>,
    /// RMS mismatch against the asymptote over the fit region.
    pub residual: f64,
    pub fit_inner: f64,
    pub fit_outer: f64,
    /// Number of kernel orders used in the asymptote (G₀ only, or G₀ + G₁).
    pub kernel_orders: usize,
}

#[derive(Clone)]
pub struct LatticeGreens {
    lattice: Lattice,
    window: Arc<Window>,
    radius: f64,
    /// N×N per site.
    values: Vec<f64>,
    pub supercell: usize,
    pub calibration: Calibration,
    /// Estimated error of the extrapolated values over the window.
    pub extrapolation_error: f64,
    /// Same estimate on the inner half window.
    pub extrapolation_error_inner: f64,
    /// Largest second extrapolation step over the window.
    pub second_step_correction: f64,
    /// Continuum kernels used beyond the window.
    tail: Arc<KernelSet>,
    tail_order: usize,
}

/// Kernel order used to extend 𝒢 past the window.
pub fn tail_order(dim: usize) -> usize {
    if dim == 2 {
        2
    } else {
        0
    }
}

/// Periodic-supercell differences G_L(n) − G_L(0) on a box of half-widths `h`.
fn supercell_differences(ms: &MultiplierSeries, l: usize, h: [i64; 3]) -> Result<BoxValues> {
    match ms.dim() {
        2 => supercell_2d(ms, l, h),
        3 => supercell_3d(ms, l, h),
        d => Err(Error::Unsupported(format!("dimension {d}"))),
    }
}

/// Values on the box [−h, h]^d, N×N per point, lexicographic.
struct BoxValues {
    h: [i64; 3],
    n: usize,
    data: Vec<f64>,
}

impl BoxValues {
    fn index(&self, s: &Site) -> usize {
        let w1 = (2 * self.h[1] + 1) as usize;
        let w2 = (2 * self.h[2] + 1) as usize;
        (((s[0] + self.h[0]) as usize * w1) + (s[1] + self.h[1]) as usize) * w2 + (s[2] + self.h[2]) as usize
    }
    fn get(&self, s: &Site) -> &[f64] {
        let i = self.index(s);
        &self.data[i * self.n * self.n..(i + 1) * self.n * self.n]
    }
}

fn sin2_table(l: usize) -> Vec<f64> {
    (0..l).map(|t| 4.0 * (PI * t as f64 / l as f64).sin().powi(2)).collect()
}

/// Upper-triangular entry list.
fn entries(n: usize) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for i in 0..n {
        for j in i..n {
            e.push((i, j));
        }
    }
    e
}

fn inverse_at(ms: &MultiplierSeries, table: &[f64], l: usize, m: &[usize], h: &mut [f64]) -> Result<Vec<f64>> {
    let n = ms.ncomp();
    h.fill(0.0);
    for t in ms.terms() {
        let mut ph: i64 = 0;
        for (a, mi) in m.iter().enumerate() {
            ph += *mi as i64 * t.v[a];
        }
        let s = table[ph.rem_euclid(l as i64) as usize];
        for (o, c) in h.iter_mut().zip(&t.coef) {
            *o += s * c;
        }
    }
    let inv = inverse(h, n).ok_or(Error::UnstableModel(0.0))?;
    for i in 0..n {
        if inv[i * n + i] <= 0.0 {
            return Err(Error::UnstableModel(0.0));
        }
    }
    Ok(inv)
}

fn supercell_2d(ms: &MultiplierSeries, l: usize, h: [i64; 3]) -> Result<BoxValues> {
    let n = ms.ncomp();
    let ents = entries(n);
    let ne = ents.len();
    let table = sin2_table(l);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_inverse(l);
    let w1 = (2 * h[0] + 1) as usize;
    let w2 = (2 * h[1] + 1) as usize;
    // buffers[e][n1 index][m2]
    let mut buf: Vec<Vec<Complex64>> = vec![vec![Complex64::new(0.0, 0.0); w1 * l]; ne];
    let npack = ne.div_ceil(2);
    let mut lines = vec![vec![Complex64::new(0.0, 0.0); l]; npack];
    let mut hmat = vec![0.0; n * n];
    let n1_of = |i: usize| i as i64 - h[0];
    for m2 in 0..=l / 2 {
        for m1 in 0..l {
            if m1 == 0 && m2 == 0 {
                for line in lines.iter_mut() {
                    line[0] = Complex64::new(0.0, 0.0);
                }
                continue;
            }
            let inv = inverse_at(ms, &table, l, &[m1, m2], &mut hmat)?;
            for (p, line) in lines.iter_mut().enumerate() {
                let (i0, j0) = ents[2 * p];
                let re = inv[i0 * n + j0];
                let im = if 2 * p + 1 < ne {
                    let (i1, j1) = ents[2 * p + 1];
                    inv[i1 * n + j1]
                } else {
                    0.0
                };
                line[m1] = Complex64::new(re, im);
            }
        }
        for (p, line) in lines.iter_mut().enumerate() {
            fft.process(line);
            for i in 0..w1 {
                let n1 = n1_of(i).rem_euclid(l as i64) as usize;
                let nm = (l - n1) % l;
                let x = line[n1];
                let xc = line[nm].conj();
                let a = (x + xc) * 0.5;
                let b = (x - xc) * Complex64::new(0.0, -0.5);
                buf[2 * p][i * l + m2] = a;
                if 2 * p + 1 < ne {
                    buf[2 * p + 1][i * l + m2] = b;
                }
            }
        }
    }
    // rows m2 > L/2 follow from evenness: F(n1, L − m2) = F(−n1, m2)
    for b in buf.iter_mut() {
        for i in 0..w1 {
            let j = w1 - 1 - i;
            for m2 in l / 2 + 1..l {
                b[i * l + m2] = b[j * l + (l - m2)];
            }
        }
    }
    let scale = 1.0 / (l as f64 * l as f64);
    let mut data = vec![0.0; w1 * w2 * n * n];
    let mut col = vec![Complex64::new(0.0, 0.0); l];
    for (e, &(i, j)) in ents.iter().enumerate() {
        for a in 0..w1 {
            col.copy_from_slice(&buf[e][a * l..(a + 1) * l]);
            fft.process(&mut col);
            for c in 0..w2 {
                let n2 = (c as i64 - h[1]).rem_euclid(l as i64) as usize;
                let v = col[n2].re * scale;
                let idx = (a * w2 + c) * n * n;
                data[idx + i * n + j] = v;
                data[idx + j * n + i] = v;
            }
        }
    }
    let mut out = BoxValues { h, n, data };
    subtract_origin(&mut out);
    Ok(out)
}

fn supercell_3d(ms: &MultiplierSeries, l: usize, h: [i64; 3]) -> Result<BoxValues> {
    let n = ms.ncomp();
    let ents = entries(n);
    let table = sin2_table(l);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_inverse(l);
    let mut hmat = vec![0.0; n * n];
    let total = l * l * l;
    let mut cube: Vec<Vec<Complex64>> = vec![vec![Complex64::new(0.0, 0.0); total]; ents.len()];
    for m0 in 0..l {
        for m1 in 0..l {
            for m2 in 0..l {
                if m0 == 0 && m1 == 0 && m2 == 0 {
                    continue;
                }
                let inv = inverse_at(ms, &table, l, &[m0, m1, m2], &mut hmat)?;
                let idx = (m0 * l + m1) * l + m2;
                for (e, &(i, j)) in ents.iter().enumerate() {
                    cube[e][idx] = Complex64::new(inv[i * n + j], 0.0);
                }
            }
        }
    }
    let mut line = vec![Complex64::new(0.0, 0.0); l];
    for c in cube.iter_mut() {
        for axis in 0..3 {
            let stride = [l * l, l, 1][axis];
            for base in 0..total {
                if !(base / stride).is_multiple_of(l) {
                    continue;
                }
                for t in 0..l {
                    line[t] = c[base + t * stride];
                }
                fft.process(&mut line);
                for t in 0..l {
                    c[base + t * stride] = line[t];
                }
            }
        }
    }
    let w = [(2 * h[0] + 1) as usize, (2 * h[1] + 1) as usize, (2 * h[2] + 1) as usize];
    let scale = 1.0 / total as f64;
    let mut data = vec![0.0; w[0] * w[1] * w[2] * n * n];
    for a in 0..w[0] {
        for b in 0..w[1] {
            for cc in 0..w[2] {
                let m = |v: usize, hh: i64| (v as i64 - hh).rem_euclid(l as i64) as usize;
                let src = (m(a, h[0]) * l + m(b, h[1])) * l + m(cc, h[2]);
                let idx = ((a * w[1] + b) * w[2] + cc) * n * n;
                for (e, &(i, j)) in ents.iter().enumerate() {
                    let v = cube[e][src].re * scale;
                    data[idx + i * n + j] = v;
                    data[idx + j * n + i] = v;
                }
            }
        }
    }
    let mut out = BoxValues { h, n, data };
    subtract_origin(&mut out);
    Ok(out)
}

fn subtract_origin(b: &mut BoxValues) {
    let nn = b.n * b.n;
    let o = b.index(&[0, 0, 0]) * nn;
    let origin: Vec<f64> = b.data[o..o + nn].to_vec();
    for chunk in b.data.chunks_mut(nn) {
        for (x, y) in chunk.iter_mut().zip(&origin) {
            *x -= y;
        }
    }
}

impl LatticeGreens {
    /// Green's function on the ball |Aℓ| ≤ window_radius, extrapolated from
    /// supercells L/2, L, 2L; L/4 enters only the error estimate.
    pub fn compute(model: &dyn SitePotential, window_radius: f64, l: usize) -> Result<Self> {
        let lat = model.lattice().clone();
        if !l.is_power_of_two() || (l as f64) < 8.0 * window_radius || l < 8 {
            return Err(Error::WindowTooSmall(format!(
                "supercell L = {l} must be a power of two with L >= 8 * window radius ({window_radius})"
            )));
        }
        let stab = stability_constant(model, 32);
        if stab.c0 <= 0.0 {
            return Err(Error::UnstableModel(stab.c0));
        }
        let ms = MultiplierSeries::new(model);
        let d = lat.dim();
        let window = Arc::new(Window::ball(&lat, window_radius, &[0.0; 3]));
        let mut h = [0i64; 3];
        for s in window.sites() {
            for a in 0..d {
                h[a] = h[a].max(s[a].abs());
            }
        }
        let quarter = supercell_differences(&ms, l / 4, h)?;
        let coarse = supercell_differences(&ms, l / 2, h)?;
        let mid = supercell_differences(&ms, l, h)?;
        let fine = supercell_differences(&ms, 2 * l, h)?;
        // images contribute O(L^{-d}), O(L^{-d-2}), O(L^{-d-4}), ...
        let f1 = 2f64.powi(d as i32);
        let f2 = 2f64.powi(d as i32 + 2);
        let f3 = 2f64.powi(d as i32 + 4);
        let double = |a: f64, b: f64, c: f64| {
            let lo = (f1 * b - a) / (f1 - 1.0);
            let hi = (f1 * c - b) / (f1 - 1.0);
            ((f2 * hi - lo) / (f2 - 1.0), (hi - lo).abs() / (f2 - 1.0))
        };
        let n = lat.ncomp();
        let nn = n * n;
        let mut values = vec![0.0; window.len() * nn];
        // [inner half window, whole window]
        let mut est = [0.0f64; 2];
        let mut second = [0.0f64; 2];
        for (k, s) in window.sites().iter().enumerate() {
            let (q, a, b, c) = (quarter.get(s), coarse.get(s), mid.get(s), fine.get(s));
            let inner = lat.norm(s) <= 0.5 * window_radius;
            for e in 0..nn {
                let (prev, _) = double(q[e], a[e], b[e]);
                let (cur, step) = double(a[e], b[e], c[e]);
                values[k * nn + e] = cur;
                // a posteriori: the same extrapolation one level coarser
                let err = (cur - prev).abs() / (f3 - 1.0);
                for r in 0..2 {
                    if r == 1 || inner {
                        est[r] = est[r].max(err);
                        second[r] = second[r].max(step);
                    }
                }
            }
        }
        let (est_inner, est_full) = (est[0], est[1]);
        if est_full > RICHARDSON_TOLERANCE {
            return Err(Error::SupercellTooSmall { estimate: est_full, tolerance: RICHARDSON_TOLERANCE });
        }
        let tail_order = tail_order(d);
        let tail = Arc::new(KernelSet::build(&ms, lat.c_vol(), tail_order)?);
        let mut g = LatticeGreens {
            tail,
            tail_order,
            lattice: lat,
            window,
            radius: window_radius,
            values,
            supercell: l,
            calibration: Calibration {
                constant: vec![0.0; nn],
                residual: 0.0,
                fit_inner: 0.0,
                fit_outer: 0.0,
                kernel_orders: 0,
            },
            extrapolation_error: est_full,
            extrapolation_error_inner: est_inner,
            second_step_correction: second[1],
        };
        g.calibrate()?;
        Ok(g)
    }

    /// Least-squares additive constant against G₀ + G₁ (d = 2) or G₀ (d = 3)
    /// on the outer third of the window.
    fn calibrate(&mut self) -> Result<()> {
        let d = self.lattice.dim();
        let orders = if d == 2 { 1 } else { 0 };
        let ks = self.tail.clone();
        let nn = self.lattice.ncomp().pow(2);
        let inner = 2.0 * self.radius / 3.0;
        let mut sum = vec![0.0; nn];
        let mut mism = Vec::new();
        for (k, s) in self.window.sites().iter().enumerate() {
            let r = self.lattice.norm(s);
            if r < inner {
                continue;
            }
            let x = self.lattice.position(s);
            let asym = ks.partial_sum(&x[..d], orders)?;
            let gap: Vec<f64> = (0..nn).map(|e| asym[e] - self.values[k * nn + e]).collect();
            for e in 0..nn {
                sum[e] += gap[e];
            }
            mism.push(gap);
        }
        if mism.is_empty() {
            return Err(Error::WindowTooSmall("no sites in calibration shell".into()));
        }
        let cnt = mism.len() as f64;
        let constant: Vec<f64> = sum.iter().map(|v| v / cnt).collect();
        let mut ss = 0.0;
        for gap in &mism {
            for e in 0..nn {
                ss += (gap[e] - constant[e]).powi(2);
            }
        }
        for chunk in self.values.chunks_mut(nn) {
            for (x, c) in chunk.iter_mut().zip(&constant) {
                *x += c;
            }
        }
        self.calibration = Calibration {
            constant,
            residual: (ss / (cnt * nn as f64)).sqrt(),
            fit_inner: inner,
            fit_outer: self.radius,
            kernel_orders: orders + 1,
        };
        Ok(())
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }
    pub fn window(&self) -> &Arc<Window> {
        &self.window
    }
    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// 𝒢(ℓ), N×N row-major.
    pub fn value(&self, s: &Site) -> Result<&[f64]> {
        let nn = self.lattice.ncomp().pow(2);
        let i = self.window.require(s)?;
        Ok(&self.values[i * nn..(i + 1) * nn])
    }

    /// 𝒢(ℓ) from the table inside the window and the kernel expansion outside.
    pub fn value_ext(&self, s: &Site) -> Result<Vec<f64>> {
        match self.window.index(s) {
            Some(_) => Ok(self.value(s)?.to_vec()),
            None => {
                let x = self.lattice.position(s);
                self.tail.partial_sum(&x[..self.lattice.dim()], self.tail_order)
            }
        }
    }

    pub fn kernels(&self) -> &Arc<KernelSet> {
        &self.tail
    }

    /// Column k of 𝒢(ℓ).
    pub fn column(&self, s: &Site, k: usize) -> Result<Vec<f64>> {
        let n = self.lattice.ncomp();
        let v = self.value(s)?;
        Ok((0..n).map(|i| v[i * n + k]).collect())
    }

    /// max |H[𝒢e_k](ℓ) − e_kδ_{ℓ0}| over |Aℓ| ≤ radius.
    pub fn defining_residual(&self, ms: &MultiplierSeries, k: usize, radius: f64) -> Result<f64> {
        let n = self.lattice.ncomp();
        let mut worst: f64 = 0.0;
        for s in self.window.sites() {
            if self.lattice.norm(s) > radius {
                continue;
            }
            let u0 = self.column(s, k)?;
            let mut hv = vec![0.0; n];
            for t in ms.terms() {
                let up = self.column(&add(s, &t.v), k)?;
                let um = self.column(&crate::lattice::sub(s, &t.v), k)?;
                for i in 0..n {
                    for j in 0..n {
                        hv[i] += t.coef[i * n + j] * (2.0 * u0[j] - up[j] - um[j]);
                    }
                }
            }
            if *s == [0, 0, 0] {
                hv[k] -= 1.0;
            }
            worst = hv.iter().fold(worst, |w, v| w.max(v.abs()));
        }
        Ok(worst)
    }

    /// max |𝒢(ℓ) − 𝒢(−ℓ)ᵀ|.
    pub fn symmetry_residual(&self) -> f64 {
        let n = self.lattice.ncomp();
        let mut worst: f64 = 0.0;
        for s in self.window.sites() {
            let a = self.value(s).unwrap();
            if let Ok(b) = self.value(&crate::lattice::neg(s)) {
                for i in 0..n {
                    for j in 0..n {
                        worst = worst.max((a[i * n + j] - b[j * n + i]).abs());
                    }
                }
            }
        }
        worst
    }

    /// Norm of the j-th differences over all stencil tuples, per site in range.
    pub fn difference_samples(&self, j: usize, r_min: f64, r_max: f64) -> Vec<(f64, f64)> {
        let nn = self.lattice.ncomp().pow(2);
        let tuples = direction_tuples(&self.lattice, j);
        let mut out = Vec::new();
        'sites: for s in self.window.sites() {
            let r = self.lattice.norm(s);
            if r < r_min || r > r_max {
                continue;
            }
            let mut worst: f64 = 0.0;
            for tup in &tuples {
                let mut acc = vec![0.0; nn];
                for mask in 0u32..(1 << j) {
                    let mut q = *s;
                    for (t, dd) in tup.iter().enumerate() {
                        if mask & (1 << t) != 0 {
                            q = add(&q, dd);
                        }
                    }
                    let sign = if (j - mask.count_ones() as usize).is_multiple_of(2) { 1.0 } else { -1.0 };
                    match self.value(&q) {
                        Ok(v) => {
                            for e in 0..nn {
                                acc[e] += sign * v[e];
                            }
                        }
                        Err(_) => continue 'sites,
                    }
                }
                worst = worst.max(acc.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
            out.push((r, worst));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let d = self.lattice.dim();
        let n = self.lattice.ncomp();
        let mut head: Vec<String> = (1..=d).map(|a| format!("n{a}")).collect();
        for i in 1..=n {
            for j in 1..=n {
                head.push(format!("G{i}{j}"));
            }
        }
        writeln!(f, "{}", head.join(","))?;
        for s in self.window.sites() {
            let mut row: Vec<String> = s[..d].iter().map(|v| v.to_string()).collect();
            row.extend(self.value(s)?.iter().map(|v| format!("{v}")));
            writeln!(f, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reload a table written by `write_csv` for the same model.
    pub fn read_csv(model: &dyn SitePotential, path: &Path, supercell: usize, radius: f64) -> Result<Self> {
        let lat = model.lattice().clone();
        let d = lat.dim();
        let nn = lat.ncomp().pow(2);
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut sites = Vec::new();
        let mut vals = Vec::new();
        for (k, line) in f.lines().enumerate() {
            let line = line?;
            if k == 0 {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != d + nn {
                return Err(Error::ConfigInvalid(format!("bad greens cache row {k}")));
            }
            let mut s = [0i64; 3];
            for a in 0..d {
                s[a] = parts[a].parse().map_err(|_| Error::ConfigInvalid("bad site".into()))?;
            }
            sites.push(s);
            for p in &parts[d..] {
                vals.push(p.parse::<f64>().map_err(|_| Error::ConfigInvalid("bad value".into()))?);
            }
        }
        let window = Arc::new(Window::from_sites(d, sites));
        let ms = MultiplierSeries::new(model);
        let tail_order = tail_order(d);
        let tail = Arc::new(KernelSet::build(&ms, lat.c_vol(), tail_order)?);
        Ok(LatticeGreens {
            tail,
            tail_order,
            lattice: lat,
            window,
            radius,
            values: vals,
            supercell,
            calibration: Calibration {
                constant: vec![0.0; nn],
                residual: f64::NAN,
                fit_inner: 0.0,
                fit_outer: 0.0,
                kernel_orders: 0,
            },
            extrapolation_error: f64::NAN,
            extrapolation_error_inner: f64::NAN,
            second_step_correction: f64::NAN,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayReport {
    pub j: usize,
    pub fit: Option<ShellFit>,
    pub log_growth: Option<LogGrowth>,
}

/// Shell-max slope of |Dʲ𝒢|; for j = 0 in d = 2 the log growth of 𝒢(ℓ) − 𝒢(0) is reported instead.
pub fn green_decay_report(g: &LatticeGreens, j: usize, r_min: f64, r_max: f64) -> Result<DecayReport> {
    if j == 0 {
        let origin = g.value(&[0, 0, 0])?.to_vec();
        let samples: Vec<(f64, f64)> = g
            .window()
            .sites()
            .iter()
            .filter_map(|s| {
                let r = g.lattice().norm(s);
                (r >= r_min && r <= r_max).then(|| (r, g.value(s).unwrap()[0] - origin[0]))
            })
            .collect();
        let lg = log_growth(&samples, r_min, r_max)?;
        return Ok(DecayReport { j, fit: None, log_growth: Some(lg) });
    }
    let samples = g.difference_samples(j, r_min, r_max);
    Ok(DecayReport { j, fit: Some(shell_fit(&samples, r_min, r_max, 0.0)?), log_growth: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{build_model, Params};

    #[test]
    fn square_lattice_known_differences() {
        let m = build_model("antiplane-sine", &Params::new()).unwrap();
        let g = LatticeGreens::compute(m.as_ref(), 16.0, 256).unwrap();
        let g0 = g.value(&[0, 0, 0]).unwrap()[0];
        let g1 = g.value(&[1, 0, 0]).unwrap()[0];
        let g11 = g.value(&[1, 1, 0]).unwrap()[0];
        assert!((g1 - g0 + 0.25).abs() < 1e-7, "{}", g1 - g0);
        assert!((g11 - g0 + 1.0 / PI).abs() < 1e-7, "{}", g11 - g0);
        assert!(g.symmetry_residual() < 1e-12);
        let ms = MultiplierSeries::new(m.as_ref());
        assert!(g.defining_residual(&ms, 0, 8.0).unwrap() < 1e-7);
    }

    #[test]
    fn rejects_small_supercell() {
        let m = build_model("antiplane-sine", &Params::new()).unwrap();
        assert!(LatticeGreens::compute(m.as_ref(), 16.0, 64).is_err());
        let bad = build_model("square-pair", &Params::new()).unwrap();
        assert!(matches!(LatticeGreens::compute(bad.as_ref(), 4.0, 64), Err(Error::UnstableModel(_))));
    }

    #[test]
    fn triangular_defining_property() {
        let m = build_model("triangular-pair", &Params::new()).unwrap();
        let g = LatticeGreens::compute(m.as_ref(), 12.0, 256).unwrap();
        let ms = MultiplierSeries::new(m.as_ref());
        for k in 0..2 {
            assert!(g.defining_residual(&ms, k, 6.0).unwrap() < 1e-7);
        }
        assert!(g.symmetry_residual() < 1e-12);
    }
}
