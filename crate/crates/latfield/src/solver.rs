//! Truncated-domain defect equilibration: energy and gradient assembly,
//! clamped and multipole-augmented cell problems, decay and convergence
//! analysis.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;

use crate::analysis::{power_fit, shell_fit, LinearFit, ShellFit};
use crate::correctors::PredictorStack;
use crate::error::{Error, Result};
use crate::fourier::MultiplierSeries;
use crate::greens::LatticeGreens;
use crate::lattice::{add, Lattice, LatticeField, Site, Window};
use crate::multipole::{compute_moments, default_basis, fit_coefficients, MultipoleCoeffs};
use crate::potentials::{stability_constant, DefectModel};

/// 𝒢 tabulated on a ball: computed values inside the Green's window, kernel
/// expansion beyond it.
pub struct GreenTable {
    window: Arc<Window>,
    nn: usize,
    radius: f64,
    values: Vec<f64>,
}

impl GreenTable {
    pub fn build(g: &LatticeGreens, radius: f64) -> Result<Self> {
        let lat = g.lattice();
        let window = Arc::new(Window::ball(lat, radius, &[0.0; 3]));
        let nn = lat.ncomp().pow(2);
        let mut values = Vec::with_capacity(window.len() * nn);
        for s in window.sites() {
            values.extend(g.value_ext(s)?);
        }
        Ok(GreenTable { window, nn, radius, values })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn get(&self, s: &Site) -> Result<&[f64]> {
        let i = self.window.index(s).ok_or_else(|| {
            Error::EvaluationDomainExceeded(format!("Green's table (radius {}) lacks site {:?}", self.radius, &s[..self.window.dim()]))
        })?;
        Ok(&self.values[i * self.nn..(i + 1) * self.nn])
    }

    /// Σ_shift 𝒢(ℓ + shift) w_shift accumulated into `out`.
    fn add_multipole(&self, shifts: &[(Site, Vec<f64>)], n: usize, site: &Site, out: &mut [f64]) -> Result<()> {
        for (s, w) in shifts {
            let g = self.get(&add(site, s))?;
            for i in 0..n {
                for k in 0..n {
                    out[i] += g[i * n + k] * w[k];
                }
            }
        }
        Ok(())
    }
}

/// Evaluates the discrete multipole field of `b` at `site` from a table.
pub fn multipole_value(b: &MultipoleCoeffs, table: &GreenTable, n: usize, site: &Site) -> Result<Vec<f64>> {
    let shifts: Vec<(Site, Vec<f64>)> = b.shifts().into_iter().collect();
    let mut out = vec![0.0; n];
    table.add_multipole(&shifts, n, site, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scheme {
    Clamped,
    /// Free multipole coefficients b^{(i,k)} for i = 1..=p.
    Augmented { p: usize },
}

impl Scheme {
    pub fn multipole_orders(&self) -> usize {
        match self {
            Scheme::Clamped => 0,
            Scheme::Augmented { p } => *p,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverOptions {
    pub gradient_tolerance: f64,
    pub max_newton: usize,
    pub max_cg: usize,
    /// Relative step of the directional difference in Hessian-vector products.
    pub fd_step: f64,
    /// R_out / R for augmented problems.
    pub buffer_factor: f64,
    /// Krylov probes used by the post-hoc stability estimate.
    pub stability_probes: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            gradient_tolerance: 1e-9,
            max_newton: 60,
            max_cg: 3000,
            fd_step: 1e-6,
            buffer_factor: 2.0,
            stability_probes: 12,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SiteKind {
    Plain,
    Special,
    Removed,
}

/// Preconditioner for the core block: inverse of the homogeneous Hessian on a
/// periodic box (d = 2) or its diagonal (d = 3).
enum CorePreconditioner {
    Fourier(FourierPreconditioner),
    Diagonal(Vec<f64>),
}

struct FourierPreconditioner {
    l: [usize; 2],
    n: usize,
    inv: Vec<f64>,
    slots: Vec<usize>,
    row: Arc<dyn Fft<f64>>,
    col: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl FourierPreconditioner {
    fn new(ms: &MultiplierSeries, free_sites: &[Site]) -> Self {
        let n = ms.ncomp();
        let mut lo = [i64::MAX; 2];
        let mut hi = [i64::MIN; 2];
        for s in free_sites {
            for a in 0..2 {
                lo[a] = lo[a].min(s[a]);
                hi[a] = hi[a].max(s[a]);
            }
        }
        let l = [0, 1].map(|a| ((hi[a] - lo[a] + 3).max(8) as usize).next_power_of_two());
        let mut inv = vec![0.0; l[0] * l[1] * n * n];
        let mut h = vec![0.0; n * n];
        for m0 in 0..l[0] {
            for m1 in 0..l[1] {
                let (a, b) = if m0 == 0 && m1 == 0 { (1, 0) } else { (m0, m1) };
                let q = [
                    2.0 * std::f64::consts::PI * a as f64 / l[0] as f64,
                    2.0 * std::f64::consts::PI * b as f64 / l[1] as f64,
                ];
                ms.multiplier_reduced(&q, &mut h);
                let hm = DMatrix::from_row_slice(n, n, &h);
                let hi = hm.try_inverse().unwrap_or_else(|| DMatrix::identity(n, n));
                let off = (m0 * l[1] + m1) * n * n;
                for i in 0..n {
                    for j in 0..n {
                        inv[off + i * n + j] = hi[(i, j)];
                    }
                }
            }
        }
        let slots = free_sites
            .iter()
            .map(|s| (s[0] - lo[0]) as usize * l[1] + (s[1] - lo[1]) as usize)
            .collect();
        let mut planner = FftPlanner::new();
        FourierPreconditioner {
            l,
            n,
            inv,
            slots,
            row: planner.plan_fft_forward(l[1]),
            col: planner.plan_fft_forward(l[0]),
            row_inv: planner.plan_fft_inverse(l[1]),
            col_inv: planner.plan_fft_inverse(l[0]),
        }
    }

    fn fft2(&self, data: &mut [Complex64], scratch: &mut [Complex64], forward: bool) {
        let [l0, l1] = self.l;
        let (row, col) = if forward { (&self.row, &self.col) } else { (&self.row_inv, &self.col_inv) };
        row.process(data);
        for i in 0..l0 {
            for j in 0..l1 {
                scratch[j * l0 + i] = data[i * l1 + j];
            }
        }
        col.process(scratch);
        for i in 0..l0 {
            for j in 0..l1 {
                data[i * l1 + j] = scratch[j * l0 + i];
            }
        }
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let n = self.n;
        let size = self.l[0] * self.l[1];
        let mut grids: Vec<Vec<Complex64>> = (0..n).map(|_| vec![Complex64::new(0.0, 0.0); size]).collect();
        let mut scratch = vec![Complex64::new(0.0, 0.0); size];
        for (f, &slot) in self.slots.iter().enumerate() {
            for i in 0..n {
                grids[i][slot].re = r[f * n + i];
            }
        }
        for g in grids.iter_mut() {
            self.fft2(g, &mut scratch, true);
        }
        let mut tmp = vec![Complex64::new(0.0, 0.0); n];
        for m in 0..size {
            let blk = &self.inv[m * n * n..(m + 1) * n * n];
            for i in 0..n {
                tmp[i] = (0..n).map(|j| grids[j][m] * blk[i * n + j]).sum();
            }
            for i in 0..n {
                grids[i][m] = tmp[i];
            }
        }
        for g in grids.iter_mut() {
            self.fft2(g, &mut scratch, false);
        }
        let scale = 1.0 / size as f64;
        for (f, &slot) in self.slots.iter().enumerate() {
            for i in 0..n {
                z[f * n + i] = grids[i][slot].re * scale;
            }
        }
    }
}

/// Cell problem on B_R with energy evaluated over B_{R_out}.
///
/// The trial state is û + v with v = Σ_c b_c φ_c + w, where w lives on the free
/// sites of B_R and φ_c are the discrete multipole fields of unit
/// coefficients. Removed sites carry v = 0.
pub struct CellProblem {
    model: Arc<DefectModel>,
    lattice: Lattice,
    n: usize,
    nb: usize,
    pub radius: f64,
    pub r_out: f64,
    pub scheme: Scheme,
    window: Arc<Window>,
    kind_w: Vec<SiteKind>,
    energy: Vec<u32>,
    kind_e: Vec<SiteKind>,
    nbr: Vec<u32>,
    dhat: Vec<f64>,
    ehat: Vec<f64>,
    sigma0: Vec<f64>,
    inner: Vec<u32>,
    far: Vec<u32>,
    inner_touch: Vec<u32>,
    far_touch: Vec<u32>,
    free: Vec<u32>,
    template: Option<MultipoleCoeffs>,
    dof_offset: usize,
    phi: Vec<Vec<f64>>,
    far_gram: Vec<f64>,
    /// Quadratic energy of the multipole fields beyond B_{R_out}.
    tail_quad: Vec<f64>,
    /// Linear pairing of the predictor stress with the multipole fields beyond B_{R_out}.
    tail_lin: Vec<f64>,
    precond: CorePreconditioner,
    pub c0: f64,
}

impl CellProblem {
    /// Builds the problem. Augmented schemes with p ≥ 1 need a Green's table
    /// covering B_{R_out + reach + |shift|}.
    pub fn new(
        model: Arc<DefectModel>,
        predictor: &PredictorStack,
        radius: f64,
        scheme: Scheme,
        r_out: Option<f64>,
        table: Option<&GreenTable>,
    ) -> Result<Self> {
        let lattice = model.lattice().clone();
        let d = lattice.dim();
        let n = lattice.ncomp();
        let nb = lattice.stencil_len();
        let reach = lattice.reach();
        let p = scheme.multipole_orders();
        let r_out = match (scheme, r_out) {
            (_, Some(r)) => r,
            (Scheme::Clamped, None) => radius + 2.0 * reach,
            (Scheme::Augmented { .. }, None) => 2.0 * radius,
        };
        if r_out < radius + reach {
            return Err(Error::ConfigInvalid(format!("buffer radius {r_out} must exceed R + reach = {}", radius + reach)));
        }
        if radius < reach {
            return Err(Error::ConfigInvalid(format!("domain radius {radius} is below the stencil reach")));
        }
        let window = Arc::new(Window::ball(&lattice, r_out + reach + 1e-9, &[0.0; 3]));
        let nw = window.len();
        let kind_of = |s: &Site| {
            if model.is_removed(s) {
                SiteKind::Removed
            } else if model.mask(s).is_some() || !std::ptr::addr_eq(model.site_potential(s), model.host.as_ref()) {
                SiteKind::Special
            } else {
                SiteKind::Plain
            }
        };
        let kind_w: Vec<SiteKind> = window.sites().iter().map(kind_of).collect();
        let mut is_free = vec![false; nw];
        let mut free = Vec::new();
        for (i, s) in window.sites().iter().enumerate() {
            if kind_w[i] != SiteKind::Removed && lattice.norm(s) <= radius * (1.0 + 1e-12) {
                is_free[i] = true;
                free.push(i as u32);
            }
        }
        let mut energy = Vec::new();
        let mut nbr = Vec::new();
        for (i, s) in window.sites().iter().enumerate() {
            if lattice.norm(s) <= r_out * (1.0 + 1e-12) {
                energy.push(i as u32);
                for rho in lattice.stencil() {
                    nbr.push(window.require(&add(s, rho))? as u32);
                }
            }
        }
        let ne = energy.len();
        let kind_e: Vec<SiteKind> = energy.iter().map(|&i| kind_w[i as usize]).collect();
        let mut dhat = vec![0.0; ne * nb * n];
        let mut ehat = vec![0.0; ne];
        let zero_predictor = predictor.is_zero();
        if !zero_predictor && n != 1 {
            return Err(Error::Unsupported("nonzero predictors are scalar".into()));
        }
        let mut tau = vec![0.0; nb * n];
        for (e, &wi) in energy.iter().enumerate() {
            let s = &window.sites()[wi as usize];
            if !zero_predictor {
                let db = predictor.bond_differences(&lattice, s)?;
                dhat[e * nb * n..(e + 1) * nb * n].copy_from_slice(&db);
            }
            if kind_e[e] != SiteKind::Removed {
                let g = &dhat[e * nb * n..(e + 1) * nb * n];
                ehat[e] = model.site_potential(s).gradient(g, model.mask(s), &mut tau);
            }
        }
        let mut sigma0 = vec![0.0; nb * n];
        model.host.gradient(&vec![0.0; nb * n], None, &mut sigma0);

        let mut inner = Vec::new();
        let mut far = Vec::new();
        let mut touch_inner = vec![false; nw];
        let mut touch_far = vec![false; nw];
        for (e, &wi) in energy.iter().enumerate() {
            let nbrs = &nbr[e * nb..(e + 1) * nb];
            let touches = is_free[wi as usize] || nbrs.iter().any(|&j| is_free[j as usize]);
            let flags = if touches {
                inner.push(e as u32);
                &mut touch_inner
            } else {
                far.push(e as u32);
                &mut touch_far
            };
            flags[wi as usize] = true;
            for &j in nbrs {
                flags[j as usize] = true;
            }
        }
        let to_list = |f: &[bool]| f.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| i as u32).collect::<Vec<u32>>();
        let inner_touch = to_list(&touch_inner);
        let far_touch = to_list(&touch_far);

        let mut shifts_all: Vec<Vec<(Site, Vec<f64>)>> = Vec::new();
        let (template, dof_offset, phi) = if p == 0 {
            (None, 0, Vec::new())
        } else {
            let table = table.ok_or_else(|| Error::WindowTooSmall("augmented scheme needs a Green's table".into()))?;
            let basis = default_basis(&lattice);
            let template = MultipoleCoeffs::zeros(&lattice, &basis, p + 1);
            let offset = n;
            let ndof = template.len() - offset;
            let mut phi = Vec::with_capacity(ndof);
            for c in 0..ndof {
                let mut flat = vec![0.0; template.len()];
                flat[offset + c] = 1.0;
                let mut b = template.clone();
                b.set_flat(&flat);
                let shifts: Vec<(Site, Vec<f64>)> = b.shifts().into_iter().collect();
                let mut f = vec![0.0; nw * n];
                for (i, s) in window.sites().iter().enumerate() {
                    if kind_w[i] == SiteKind::Removed {
                        continue;
                    }
                    table.add_multipole(&shifts, n, s, &mut f[i * n..(i + 1) * n]).map_err(|e| match e {
                        Error::EvaluationDomainExceeded(m) => Error::WindowTooSmall(m),
                        other => other,
                    })?;
                }
                phi.push(f);
                shifts_all.push(shifts);
            }
            (Some(template), offset, phi)
        };
        let ndof_b = phi.len();
        let mut far_gram = vec![0.0; ndof_b * ndof_b];
        if ndof_b > 0 {
            for &e in &far {
                let e = e as usize;
                let wi = energy[e] as usize;
                if kind_e[e] == SiteKind::Removed {
                    continue;
                }
                let mask = model.mask(&window.sites()[wi]);
                for b in 0..nb {
                    if mask.is_some_and(|m| !m[b]) {
                        continue;
                    }
                    let j = nbr[e * nb + b] as usize;
                    for i in 0..n {
                        for c in 0..ndof_b {
                            let dc = phi[c][j * n + i] - phi[c][wi * n + i];
                            for c2 in 0..ndof_b {
                                far_gram[c * ndof_b + c2] += dc * (phi[c2][j * n + i] - phi[c2][wi * n + i]);
                            }
                        }
                    }
                }
            }
        }
        let tail_quad = match table {
            Some(t) if ndof_b > 0 => tail_quadratic_form(&model, &window, &energy, &nbr, &phi, &shifts_all, t)?,
            _ => Vec::new(),
        };
        let tail_lin = if ndof_b > 0 && !zero_predictor {
            tail_linear_form(&model, predictor, &window, &energy, &phi)?
        } else {
            vec![0.0; ndof_b]
        };
        let ms = MultiplierSeries::new(model.host.as_ref());
        let precond = if d == 2 {
            let sites: Vec<Site> = free.iter().map(|&i| window.sites()[i as usize]).collect();
            CorePreconditioner::Fourier(FourierPreconditioner::new(&ms, &sites))
        } else {
            let mut diag = vec![0.0; n];
            for t in ms.terms() {
                for (i, dg) in diag.iter_mut().enumerate() {
                    *dg += 2.0 * t.coef[i * n + i];
                }
            }
            CorePreconditioner::Diagonal(diag.iter().map(|x| 1.0 / x).collect())
        };
        let c0 = stability_constant(model.host.as_ref(), 32).c0;
        Ok(CellProblem {
            model,
            lattice,
            n,
            nb,
            radius,
            r_out,
            scheme,
            window,
            kind_w,
            energy,
            kind_e,
            nbr,
            dhat,
            ehat,
            sigma0,
            inner,
            far,
            inner_touch,
            far_touch,
            free,
            template,
            dof_offset,
            phi,
            far_gram,
            tail_quad,
            tail_lin,
            precond,
            c0,
        })
    }

    pub fn window(&self) -> &Arc<Window> {
        &self.window
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn n_core(&self) -> usize {
        self.free.len() * self.n
    }

    pub fn n_multipole(&self) -> usize {
        self.phi.len()
    }

    pub fn n_dofs(&self) -> usize {
        self.n_core() + self.n_multipole()
    }

    /// Free core sites, in DOF order.
    pub fn free_sites(&self) -> Vec<Site> {
        self.free.iter().map(|&i| self.window.sites()[i as usize]).collect()
    }

    /// Multipole coefficients (orders 0..=p, order 0 fixed at zero) for a DOF vector.
    pub fn coefficients(&self, x: &[f64]) -> Option<MultipoleCoeffs> {
        self.template.as_ref().map(|t| {
            let mut flat = vec![0.0; t.len()];
            flat[self.dof_offset..].copy_from_slice(&x[self.n_core()..]);
            let mut b = t.clone();
            b.set_flat(&flat);
            b
        })
    }

    fn assemble(&self, x: &[f64], sites: Option<&[u32]>, v: &mut [f64]) {
        let n = self.n;
        let nc = self.n_core();
        let xb = &x[nc..];
        let put = |i: usize, v: &mut [f64]| {
            for a in 0..n {
                v[i * n + a] = xb.iter().zip(&self.phi).map(|(c, f)| c * f[i * n + a]).sum();
            }
        };
        match sites {
            Some(list) => list.iter().for_each(|&i| put(i as usize, v)),
            None => (0..self.window.len()).for_each(|i| put(i, v)),
        }
        for (f, &i) in self.free.iter().enumerate() {
            let i = i as usize;
            for a in 0..n {
                v[i * n + a] += x[f * n + a];
            }
        }
    }

    /// Trial field v over the problem window.
    pub fn field(&self, x: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.window.len() * self.n];
        self.assemble(x, None, &mut v);
        v
    }

    /// Energy of the listed energy sites; site gradients are added into `gs`.
    fn accumulate(&self, sites: &[u32], v: &[f64], gs: &mut [f64]) -> (f64, f64) {
        let (n, nb) = (self.n, self.nb);
        let w = nb * n;
        let mut g = vec![0.0; w];
        let mut tau = vec![0.0; w];
        let mut total = 0.0;
        let mut scale = 0.0;
        for &e in sites {
            let e = e as usize;
            let wi = self.energy[e] as usize;
            let dh = &self.dhat[e * w..(e + 1) * w];
            let nbrs = &self.nbr[e * nb..(e + 1) * nb];
            for (b, &j) in nbrs.iter().enumerate() {
                let j = j as usize;
                for i in 0..n {
                    g[b * n + i] = dh[b * n + i] + v[j * n + i] - v[wi * n + i];
                }
            }
            let lin: f64 = (0..w).map(|q| self.sigma0[q] * (g[q] - dh[q])).sum();
            let raw = match self.kind_e[e] {
                SiteKind::Removed => {
                    tau.fill(0.0);
                    0.0
                }
                SiteKind::Plain => self.model.host.gradient(&g, None, &mut tau),
                SiteKind::Special => {
                    let s = &self.window.sites()[wi];
                    self.model.site_potential(s).gradient(&g, self.model.mask(s), &mut tau)
                }
            };
            let term = raw - self.ehat[e] - lin;
            total += term;
            scale += raw.abs() + self.ehat[e].abs() + lin.abs();
            for (b, &j) in nbrs.iter().enumerate() {
                let j = j as usize;
                for i in 0..n {
                    let t = tau[b * n + i] - self.sigma0[b * n + i];
                    gs[j * n + i] += t;
                    gs[wi * n + i] -= t;
                }
            }
        }
        (total, scale)
    }

    fn collect(&self, gs: &[f64], touched: Option<&[u32]>, out: &mut [f64]) {
        let n = self.n;
        for (f, &i) in self.free.iter().enumerate() {
            let i = i as usize;
            out[f * n..(f + 1) * n].copy_from_slice(&gs[i * n..(i + 1) * n]);
        }
        let nc = self.n_core();
        for (c, phi) in self.phi.iter().enumerate() {
            let mut s = 0.0;
            let mut add_site = |i: usize| {
                if self.kind_w[i] != SiteKind::Removed {
                    for a in 0..n {
                        s += phi[i * n + a] * gs[i * n + a];
                    }
                }
            };
            match touched {
                Some(list) => list.iter().for_each(|&i| add_site(i as usize)),
                None => (0..self.window.len()).for_each(&mut add_site),
            }
            out[nc + c] = s;
        }
    }

    /// Energy difference relative to the predictor-only state and its gradient
    /// over all free DOFs.
    pub fn energy_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (e, _, g) = self.energy_gradient_scaled(x);
        Ok((e, g))
    }

    fn energy_gradient_scaled(&self, x: &[f64]) -> (f64, f64, Vec<f64>) {
        let v = self.field(x);
        let mut gs = vec![0.0; v.len()];
        let all: Vec<u32> = (0..self.energy.len() as u32).collect();
        let (mut e, scale) = self.accumulate(&all, &v, &mut gs);
        let mut g = vec![0.0; self.n_dofs()];
        self.collect(&gs, None, &mut g);
        let nc = self.n_core();
        let nbd = self.n_multipole();
        for r in 0..nbd {
            let qb: f64 = (0..nbd).map(|c| self.tail_quad[r * nbd + c] * x[nc + c]).sum();
            e += x[nc + r] * (0.5 * qb + self.tail_lin[r]);
            g[nc + r] += qb + self.tail_lin[r];
        }
        (e, scale, g)
    }

    fn inner_gradient(&self, x: &[f64], ws: &mut Workspace) -> Vec<f64> {
        self.assemble(x, Some(&self.inner_touch), &mut ws.v);
        for &i in &self.inner_touch {
            let i = i as usize;
            ws.gs[i * self.n..(i + 1) * self.n].fill(0.0);
        }
        self.accumulate(&self.inner, &ws.v, &mut ws.gs);
        let mut g = vec![0.0; self.n_dofs()];
        self.collect(&ws.gs, Some(&self.inner_touch), &mut g);
        g
    }

    /// Gradient of the far energy with respect to the multipole DOFs only.
    fn far_gradient(&self, xb: &[f64], ws: &mut Workspace) -> Vec<f64> {
        let n = self.n;
        let nc = self.n_core();
        let mut x = vec![0.0; self.n_dofs()];
        x[nc..].copy_from_slice(xb);
        for &i in &self.far_touch {
            let i = i as usize;
            for a in 0..n {
                ws.v[i * n + a] = xb.iter().zip(&self.phi).map(|(c, f)| c * f[i * n + a]).sum();
            }
            ws.gs[i * n..(i + 1) * n].fill(0.0);
        }
        self.accumulate(&self.far, &ws.v, &mut ws.gs);
        let mut g = vec![0.0; self.n_dofs()];
        self.collect(&ws.gs, Some(&self.far_touch), &mut g);
        g[nc..].to_vec()
    }

    /// |Dp|² over active bonds of inner energy sites, for a direction field
    /// assembled into `ws.v`.
    fn inner_dnorm2(&self, v: &[f64]) -> f64 {
        let (n, nb) = (self.n, self.nb);
        let mut s = 0.0;
        for &e in &self.inner {
            let e = e as usize;
            if self.kind_e[e] == SiteKind::Removed {
                continue;
            }
            let wi = self.energy[e] as usize;
            let mask = if self.kind_e[e] == SiteKind::Special { self.model.mask(&self.window.sites()[wi]) } else { None };
            for b in 0..nb {
                if mask.is_some_and(|m| !m[b]) {
                    continue;
                }
                let j = self.nbr[e * nb + b] as usize;
                for i in 0..n {
                    s += (v[j * n + i] - v[wi * n + i]).powi(2);
                }
            }
        }
        s
    }

    fn apply_core(&self, r: &[f64], z: &mut [f64]) {
        match &self.precond {
            CorePreconditioner::Fourier(f) => f.apply(r, z),
            CorePreconditioner::Diagonal(d) => {
                for (i, (zi, ri)) in z.iter_mut().zip(r).enumerate() {
                    *zi = ri * d[i % self.n];
                }
            }
        }
    }

    /// Block LDLᵀ preconditioner with the core block approximated by P and
    /// the exact multipole Schur complement of that approximation.
    fn apply_preconditioner(&self, bp: &BlockPreconditioner, r: &[f64], z: &mut [f64]) {
        let nc = self.n_core();
        let nbd = self.n_multipole();
        self.apply_core(&r[..nc], &mut z[..nc]);
        if nbd == 0 {
            return;
        }
        let t: Vec<f64> = (0..nbd).map(|c| r[nc + c] - dot(&bp.h_wb[c], &z[..nc])).collect();
        let y: Vec<f64> = (0..nbd).map(|i| (0..nbd).map(|j| bp.s_inv[(i, j)] * t[j]).sum()).collect();
        for c in 0..nbd {
            for (zi, pc) in z[..nc].iter_mut().zip(&bp.ph_wb[c]) {
                *zi -= pc * y[c];
            }
            z[nc + c] = y[c];
        }
    }
}

struct BlockPreconditioner {
    /// Columns H_wb e_c over the core DOFs.
    h_wb: Vec<Vec<f64>>,
    /// P H_wb e_c.
    ph_wb: Vec<Vec<f64>>,
    s_inv: DMatrix<f64>,
}

/// ½ bᵀQb is the harmonic energy of Σ b_c φ_c outside B_{R_out}. Summation
/// by parts gives the full-lattice form as a pairing with the multipole
/// forcing, so Q = Σ_s φ_c(−s)·w_s^{(c')} minus the form summed over B_{R_out}.
fn tail_quadratic_form(
    model: &DefectModel,
    window: &Window,
    energy: &[u32],
    nbr: &[u32],
    phi: &[Vec<f64>],
    shifts: &[Vec<(Site, Vec<f64>)>],
    table: &GreenTable,
) -> Result<Vec<f64>> {
    let lat = model.lattice();
    let n = lat.ncomp();
    let nb = lat.stencil_len();
    let m = phi.len();
    let raw = |c: usize, s: &Site| -> Result<Vec<f64>> {
        let mut out = vec![0.0; n];
        table.add_multipole(&shifts[c], n, s, &mut out)?;
        Ok(out)
    };
    let mut removed_raw = std::collections::HashMap::new();
    for (i, s) in window.sites().iter().enumerate() {
        if model.is_removed(s) {
            removed_raw.insert(i, (0..m).map(|c| raw(c, s)).collect::<Result<Vec<_>>>()?);
        }
    }
    let val = |c: usize, i: usize, a: usize| match removed_raw.get(&i) {
        Some(r) => r[c][a],
        None => phi[c][i * n + a],
    };
    let mut q = vec![0.0; m * m];
    for c in 0..m {
        for c2 in 0..m {
            for (s, w) in &shifts[c2] {
                let at = raw(c, &crate::lattice::neg(s))?;
                q[c * m + c2] += (0..n).map(|a| at[a] * w[a]).sum::<f64>();
            }
        }
    }
    let w = nb * n;
    let k = model.host.hessian(&vec![0.0; w]);
    let mut dphi = vec![0.0; m * w];
    let mut kd = vec![0.0; m * w];
    for (e, &wi) in energy.iter().enumerate() {
        let wi = wi as usize;
        for c in 0..m {
            for b in 0..nb {
                let j = nbr[e * nb + b] as usize;
                for a in 0..n {
                    dphi[c * w + b * n + a] = val(c, j, a) - val(c, wi, a);
                }
            }
            for r in 0..w {
                kd[c * w + r] = (0..w).map(|t| k[r * w + t] * dphi[c * w + t]).sum();
            }
        }
        for c in 0..m {
            for c2 in 0..m {
                q[c * m + c2] -= dot(&dphi[c * w..(c + 1) * w], &kd[c2 * w..(c2 + 1) * w]);
            }
        }
    }
    for r in 0..m {
        for c in 0..r {
            let avg = 0.5 * (q[r * m + c] + q[c * m + r]);
            q[r * m + c] = avg;
            q[c * m + r] = avg;
        }
    }
    Ok(q)
}

/// Σ_{ℓ ∉ B_{R_out}} (∇V(Dû) − σ₀)(ℓ) : Dφ_c(ℓ). Summation by parts leaves the
/// flux through the boundary of the energy domain plus an exterior bulk term
/// of order R_out⁻³, which is dropped.
fn tail_linear_form(
    model: &DefectModel,
    predictor: &PredictorStack,
    window: &Window,
    energy: &[u32],
    phi: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let lat = model.lattice();
    let n = lat.ncomp();
    let nb = lat.stencil_len();
    let mut inside = vec![false; window.len()];
    for &e in energy {
        inside[e as usize] = true;
    }
    let mut sigma0 = vec![0.0; nb * n];
    model.host.gradient(&vec![0.0; nb * n], None, &mut sigma0);
    let mut tau = vec![0.0; nb * n];
    let mut stress = |s: &Site| -> Result<Vec<f64>> {
        let db = predictor.bond_differences(lat, s)?;
        model.host.gradient(&db, None, &mut tau);
        Ok(tau.iter().zip(&sigma0).map(|(a, b)| a - b).collect())
    };
    let mut out = vec![0.0; phi.len()];
    for (i, s) in window.sites().iter().enumerate() {
        let mut cached: Option<Vec<f64>> = None;
        for (b, rho) in lat.stencil().iter().enumerate() {
            let Some(j) = window.index(&add(s, rho)) else { continue };
            let sign = match (inside[i], inside[j]) {
                (false, true) => 1.0,
                (true, false) => -1.0,
                _ => continue,
            };
            if cached.is_none() {
                cached = Some(stress(s)?);
            }
            let t = cached.as_ref().unwrap();
            for (c, f) in phi.iter().enumerate() {
                out[c] += sign * (0..n).map(|a| f[j * n + a] * t[b * n + a]).sum::<f64>();
            }
        }
    }
    Ok(out)
}

struct Workspace {
    v: Vec<f64>,
    gs: Vec<f64>,
}

/// Linearisation data at a Newton iterate.
struct Linearisation<'a> {
    x: &'a [f64],
    g_inner: Vec<f64>,
    hbb_far: Vec<f64>,
    step_scale: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl CellProblem {
    fn linearise<'a>(&self, x: &'a [f64], ws: &mut Workspace, fd_step: f64) -> Linearisation<'a> {
        let nc = self.n_core();
        let nbd = self.n_multipole();
        let step_scale = fd_step * x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let mut hbb_far = vec![0.0; nbd * nbd];
        if nbd > 0 {
            let xb = x[nc..].to_vec();
            let g0 = self.far_gradient(&xb, ws);
            for c in 0..nbd {
                let mut xp = xb.clone();
                xp[c] += step_scale;
                let gp = self.far_gradient(&xp, ws);
                for r in 0..nbd {
                    hbb_far[r * nbd + c] = (gp[r] - g0[r]) / step_scale;
                }
            }
            for (h, q) in hbb_far.iter_mut().zip(&self.tail_quad) {
                *h += q;
            }
            for r in 0..nbd {
                for c in 0..r {
                    let m = 0.5 * (hbb_far[r * nbd + c] + hbb_far[c * nbd + r]);
                    hbb_far[r * nbd + c] = m;
                    hbb_far[c * nbd + r] = m;
                }
            }
        }
        let g_inner = self.inner_gradient(x, ws);
        Linearisation { x, g_inner, hbb_far, step_scale }
    }

    /// Hessian-vector product by forward differencing of the analytic gradient.
    fn hess_vec(&self, lin: &Linearisation, d: &[f64], ws: &mut Workspace) -> Vec<f64> {
        let nc = self.n_core();
        let nbd = self.n_multipole();
        let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if dmax == 0.0 {
            return vec![0.0; d.len()];
        }
        let eps = lin.step_scale / dmax;
        let xp: Vec<f64> = lin.x.iter().zip(d).map(|(a, b)| a + eps * b).collect();
        let gp = self.inner_gradient(&xp, ws);
        let mut out: Vec<f64> = gp.iter().zip(&lin.g_inner).map(|(a, b)| (a - b) / eps).collect();
        for r in 0..nbd {
            out[nc + r] += (0..nbd).map(|c| lin.hbb_far[r * nbd + c] * d[nc + c]).sum::<f64>();
        }
        out
    }

    fn block_preconditioner(&self, lin: &Linearisation, ws: &mut Workspace) -> BlockPreconditioner {
        let nc = self.n_core();
        let nbd = self.n_multipole();
        let mut h = DMatrix::zeros(nbd, nbd);
        let mut h_wb = Vec::with_capacity(nbd);
        let mut ph_wb = Vec::with_capacity(nbd);
        for c in 0..nbd {
            let mut e = vec![0.0; self.n_dofs()];
            e[nc + c] = 1.0;
            let col = self.hess_vec(lin, &e, ws);
            for r in 0..nbd {
                h[(r, c)] = col[nc + r];
            }
            let mut pc = vec![0.0; nc];
            self.apply_core(&col[..nc], &mut pc);
            h_wb.push(col[..nc].to_vec());
            ph_wb.push(pc);
        }
        let mut schur = DMatrix::from_fn(nbd, nbd, |i, j| h[(i, j)] - dot(&h_wb[i], &ph_wb[j]));
        schur = (&schur + schur.transpose()) * 0.5;
        let hs = (&h + h.transpose()) * 0.5;
        let s_inv = match schur.cholesky() {
            Some(ch) => ch.inverse(),
            None => {
                // drop the coupling when P is too crude for a positive Schur complement
                ph_wb.iter_mut().for_each(|c| c.fill(0.0));
                h_wb.iter_mut().for_each(|c| c.fill(0.0));
                match hs.clone().cholesky() {
                    Some(ch) => ch.inverse(),
                    None => DMatrix::from_fn(nbd, nbd, |i, j| if i == j { 1.0 / hs[(i, i)].abs().max(1e-12) } else { 0.0 }),
                }
            }
        };
        BlockPreconditioner { h_wb, ph_wb, s_inv }
    }

    /// Preconditioned CG for H d = rhs. Returns (d, iterations, min Ritz ratio).
    fn pcg(
        &self,
        lin: &Linearisation,
        bp: &BlockPreconditioner,
        rhs: &[f64],
        tol: f64,
        max_iter: usize,
        ws: &mut Workspace,
        track_ritz: bool,
    ) -> (Vec<f64>, usize, f64) {
        let m = rhs.len();
        let nc = self.n_core();
        let nbd = self.n_multipole();
        let mut d = vec![0.0; m];
        let mut r = rhs.to_vec();
        let mut z = vec![0.0; m];
        self.apply_preconditioner(bp, &r, &mut z);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ritz = f64::INFINITY;
        let mut it = 0;
        while it < max_iter {
            let hp = self.hess_vec(lin, &p, ws);
            let php = dot(&p, &hp);
            if track_ritz {
                self.assemble(&p, Some(&self.inner_touch), &mut ws.v);
                let pb = &p[nc..];
                let mut dn = self.inner_dnorm2(&ws.v);
                for a in 0..nbd {
                    for b in 0..nbd {
                        dn += pb[a] * self.far_gram[a * nbd + b] * pb[b];
                    }
                }
                if dn > 0.0 {
                    ritz = ritz.min(php / dn);
                }
            }
            it += 1;
            if php <= 0.0 {
                if it == 1 {
                    return (z, it, ritz.min(php));
                }
                break;
            }
            let alpha = rz / php;
            for i in 0..m {
                d[i] += alpha * p[i];
                r[i] -= alpha * hp[i];
            }
            if norm(&r) <= tol {
                break;
            }
            self.apply_preconditioner(bp, &r, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..m {
                p[i] = z[i] + beta * p[i];
            }
        }
        (d, it, ritz)
    }

    fn workspace(&self) -> Workspace {
        Workspace { v: vec![0.0; self.window.len() * self.n], gs: vec![0.0; self.window.len() * self.n] }
    }

    /// Smallest Ritz ratio ⟨Hp,p⟩/|Dp|² over Krylov directions of a random
    /// right-hand side on the core DOFs.
    fn stability_probe(&self, x: &[f64], opts: &SolverOptions, ws: &mut Workspace) -> f64 {
        if self.n_core() == 0 || opts.stability_probes == 0 {
            return f64::INFINITY;
        }
        let lin = self.linearise(x, ws, opts.fd_step);
        let bp = self.block_preconditioner(&lin, ws);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rhs: Vec<f64> = (0..self.n_dofs()).map(|_| rng.random_range(-1.0..1.0)).collect();
        rhs[self.n_core()..].fill(0.0);
        let (_, _, ritz) = self.pcg(&lin, &bp, &rhs, 0.0, opts.stability_probes, ws, true);
        ritz
    }

    /// Newton-CG minimisation from `start` (zeros when `None`).
    pub fn solve(self: &Arc<Self>, opts: &SolverOptions, start: Option<&[f64]>) -> Result<CellSolution> {
        let t0 = Stopwatch::start();
        let mut ws = self.workspace();
        let mut x = start.map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; self.n_dofs()]);
        let (mut e, mut scale, mut g) = self.energy_gradient_scaled(&x);
        let mut iterations = 0;
        let mut cg_total = 0;
        let mut converged = false;
        let mut ritz_last = f64::INFINITY;
        loop {
            let gn = norm(&g);
            if gn <= opts.gradient_tolerance {
                converged = true;
                break;
            }
            if iterations >= opts.max_newton {
                break;
            }
            iterations += 1;
            let lin = self.linearise(&x, &mut ws, opts.fd_step);
            let bp = self.block_preconditioner(&lin, &mut ws);
            let eta = 0.5f64.min(gn.sqrt());
            let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
            let (d, its, ritz) = self.pcg(&lin, &bp, &rhs, eta * gn, opts.max_cg, &mut ws, false);
            ritz_last = ritz;
            cg_total += its;
            let slope = dot(&g, &d);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
                let (et, st, gt) = self.energy_gradient_scaled(&xt);
                let noise = 1e-15 * scale.max(st);
                let armijo = et <= e + 1e-4 * alpha * slope;
                let flat = et <= e + noise && norm(&gt) < gn;
                if armijo || flat {
                    x = xt;
                    e = et;
                    scale = st;
                    g = gt;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        let gradient_norm = norm(&g);
        let ritz = if converged { self.stability_probe(&x, opts, &mut ws) } else { ritz_last };
        let _ = ritz_last;
        if converged && ritz <= 0.0 {
            return Err(Error::InstabilityDetected(ritz));
        }
        let report = SolveReport {
            converged,
            iterations,
            cg_iterations: cg_total,
            gradient_norm,
            energy: e,
            energy_scale: scale,
            min_ritz_ratio: ritz,
            c0: self.c0,
            stability_ok: ritz >= 0.5 * self.c0,
            radius: self.radius,
            r_out: self.r_out,
            scheme: self.scheme,
            n_dofs: self.n_dofs(),
            multipole_dofs: x[self.n_core()..].to_vec(),
            runtime_s: t0.seconds(),
            dofs: x.clone(),
        };
        if !converged {
            return Err(Error::NotConverged { iterations, gradient_norm });
        }
        let v = self.field(&x);
        Ok(CellSolution { coeffs: self.coefficients(&x), window: self.window.clone(), model: self.model.clone(), v, report })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    pub cg_iterations: usize,
    /// ℓ² norm of the gradient over free DOFs at the returned state.
    pub gradient_norm: f64,
    pub energy: f64,
    /// Σ |V| over site terms, the scale of rounding in `energy`.
    pub energy_scale: f64,
    pub min_ritz_ratio: f64,
    pub c0: f64,
    /// Whether the Ritz surrogate is at least c0/2.
    pub stability_ok: bool,
    pub radius: f64,
    pub r_out: f64,
    pub scheme: Scheme,
    pub n_dofs: usize,
    pub multipole_dofs: Vec<f64>,
    /// Wall time; kept out of serialized reports so they stay reproducible.
    #[serde(skip)]
    pub runtime_s: f64,
    #[serde(skip)]
    pub dofs: Vec<f64>,
}

/// Converged state: v = multipole + core correction on the problem window,
/// extended by the multipole field (or zero) beyond it.
#[derive(Clone)]
pub struct CellSolution {
    pub report: SolveReport,
    pub window: Arc<Window>,
    pub model: Arc<DefectModel>,
    pub v: Vec<f64>,
    pub coeffs: Option<MultipoleCoeffs>,
}

impl CellSolution {
    fn ncomp(&self) -> usize {
        self.model.lattice().ncomp()
    }

    /// v(ℓ); beyond the window the multipole field from `table`, or zero.
    pub fn value(&self, s: &Site, table: Option<&GreenTable>) -> Result<Vec<f64>> {
        let n = self.ncomp();
        if let Some(i) = self.window.index(s) {
            return Ok(self.v[i * n..(i + 1) * n].to_vec());
        }
        match (&self.coeffs, table) {
            (Some(b), Some(t)) if b.flat().iter().any(|c| *c != 0.0) => {
                if self.model.is_removed(s) {
                    Ok(vec![0.0; n])
                } else {
                    multipole_value(b, t, n, s)
                }
            }
            (Some(b), None) if b.flat().iter().any(|c| *c != 0.0) => {
                Err(Error::EvaluationDomainExceeded("multipole tail needs a Green's table".into()))
            }
            _ => Ok(vec![0.0; n]),
        }
    }

    /// v as a lattice field on the solution window.
    pub fn field(&self) -> LatticeField {
        LatticeField { window: self.window.clone(), ncomp: self.ncomp(), values: self.v.clone() }
    }

    /// v minus the multipole field of `b`.
    pub fn minus_multipole(&self, b: &MultipoleCoeffs, table: &GreenTable) -> Result<LatticeField> {
        let n = self.ncomp();
        let shifts: Vec<(Site, Vec<f64>)> = b.shifts().into_iter().collect();
        let mut values = self.v.clone();
        let mut tmp = vec![0.0; n];
        for (i, s) in self.window.sites().iter().enumerate() {
            if self.model.is_removed(s) {
                continue;
            }
            tmp.fill(0.0);
            table.add_multipole(&shifts, n, s, &mut tmp)?;
            for a in 0..n {
                values[i * n + a] -= tmp[a];
            }
        }
        Ok(LatticeField { window: self.window.clone(), ncomp: n, values })
    }
}

/// (|ℓ|, |Dv(ℓ)|) over surviving sites with |ℓ| ≤ r_max, active bonds only.
pub fn bond_norm_samples(model: &DefectModel, v: &LatticeField, r_max: f64) -> Vec<(f64, f64)> {
    let lat = model.lattice();
    let n = v.ncomp;
    let mut out = Vec::new();
    for (i, s) in v.window.sites().iter().enumerate() {
        let r = lat.norm(s);
        if r > r_max || model.is_removed(s) {
            continue;
        }
        let mask = model.mask(s);
        let mut acc = 0.0;
        let mut ok = true;
        for (b, rho) in lat.stencil().iter().enumerate() {
            if mask.is_some_and(|m| !m[b]) {
                continue;
            }
            match v.window.index(&add(s, rho)) {
                Some(j) => {
                    for a in 0..n {
                        acc += (v.values[j * n + a] - v.values[i * n + a]).powi(2);
                    }
                }
                None => ok = false,
            }
        }
        if ok {
            out.push((r, acc.sqrt()));
        }
    }
    out
}

/// Shell-max decay fit of |Dv| on [r_min, r_max], dividing by log^q |ℓ|.
pub fn decay_report(model: &DefectModel, v: &LatticeField, r_min: f64, r_max: f64, q: f64) -> Result<ShellFit> {
    shell_fit(&bond_norm_samples(model, v, r_max), r_min, r_max, q)
}

/// H[v] of the homogeneous host operator on B_radius.
pub fn linearised_forces(model: &DefectModel, v: &LatticeField, radius: f64) -> Result<LatticeField> {
    let lat = model.lattice();
    let ms = MultiplierSeries::new(model.host.as_ref());
    let n = lat.ncomp();
    let window = Arc::new(Window::ball(lat, radius, &[0.0; 3]));
    let get = |s: &Site| v.get(s);
    let mut values = vec![0.0; window.len() * n];
    for (idx, s) in window.sites().iter().enumerate() {
        let u0 = get(s)?;
        for t in ms.terms() {
            let up = get(&add(s, &t.v))?;
            let um = get(&crate::lattice::sub(s, &t.v))?;
            for i in 0..n {
                for j in 0..n {
                    values[idx * n + i] += t.coef[i * n + j] * (2.0 * u0[j] - up[j] - um[j]);
                }
            }
        }
    }
    Ok(LatticeField { window, ncomp: n, values })
}

/// Multipole coefficients b^{(0)}..b^{(p−1)} fitted to the moments of H[v] over B_radius.
pub fn moment_fit(model: &DefectModel, v: &LatticeField, radius: f64, p: usize) -> Result<MultipoleCoeffs> {
    if p == 0 {
        return Err(Error::InvalidOrder(0));
    }
    let lat = model.lattice();
    let f = linearised_forces(model, v, radius)?;
    let moments = compute_moments(&f, lat, p - 1, radius)?;
    fit_coefficients(&moments, lat, &default_basis(lat))
}

/// Radius a Green's table must cover for an augmented problem with buffer r_out.
pub fn table_radius(lattice: &Lattice, r_out: f64, p: usize) -> f64 {
    r_out + lattice.reach() + p as f64 * lattice.reach() + 1.0
}

pub fn solve_clamped(model: Arc<DefectModel>, predictor: &PredictorStack, radius: f64, opts: &SolverOptions) -> Result<CellSolution> {
    let problem = Arc::new(CellProblem::new(model, predictor, radius, Scheme::Clamped, None, None)?);
    problem.solve(opts, None)
}

pub fn solve_augmented(
    model: Arc<DefectModel>,
    predictor: &PredictorStack,
    radius: f64,
    p: usize,
    table: Option<&GreenTable>,
    opts: &SolverOptions,
) -> Result<CellSolution> {
    let r_out = opts.buffer_factor * radius;
    let problem = Arc::new(CellProblem::new(model, predictor, radius, Scheme::Augmented { p }, Some(r_out), table)?);
    problem.solve(opts, None)
}

#[derive(Debug, Clone, Serialize)]
pub struct ReferenceDescriptor {
    pub radius: f64,
    pub r_out: f64,
    pub scheme: Scheme,
    pub gradient_norm: f64,
    pub energy: f64,
    pub multipole_dofs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceStudy {
    pub scheme: Scheme,
    pub radii: Vec<f64>,
    pub errors: Vec<f64>,
    pub energies: Vec<f64>,
    pub fit: LinearFit,
    pub log_power: f64,
    pub reference: ReferenceDescriptor,
    pub error_domain_radius: f64,
}

/// Reference solution shared by several studies.
pub struct StudyContext {
    pub model: Arc<DefectModel>,
    pub predictor: Arc<PredictorStack>,
    pub table: Option<Arc<GreenTable>>,
    pub reference: CellSolution,
}

impl StudyContext {
    /// Solves the reference problem: augmented p = 1 at `reference_radius`
    /// (clamped when no Green's function is given), gradient tolerance 1e−11.
    pub fn new(
        model: Arc<DefectModel>,
        predictor: Arc<PredictorStack>,
        greens: Option<&LatticeGreens>,
        reference_radius: f64,
        opts: &SolverOptions,
    ) -> Result<Self> {
        let lat = model.lattice().clone();
        let r_out = opts.buffer_factor * reference_radius;
        let table = match greens {
            Some(g) => Some(Arc::new(GreenTable::build(g, table_radius(&lat, r_out, 1))?)),
            None => None,
        };
        let scheme = if table.is_some() { Scheme::Augmented { p: 1 } } else { Scheme::Clamped };
        let problem = Arc::new(CellProblem::new(model.clone(), &predictor, reference_radius, scheme, Some(r_out), table.as_deref())?);
        let ref_opts = SolverOptions { gradient_tolerance: 1e-11, ..opts.clone() };
        let reference = problem.solve(&ref_opts, None)?;
        Ok(StudyContext { model, predictor, table, reference })
    }

    /// ‖D(v − v_ref)‖ over active bonds of the reference energy domain.
    pub fn error(&self, sol: &CellSolution) -> Result<f64> {
        let lat = self.model.lattice();
        let n = lat.ncomp();
        let rw = &self.reference.window;
        let r_dom = self.reference.report.r_out;
        let mut diff = vec![0.0; rw.len() * n];
        for (i, s) in rw.sites().iter().enumerate() {
            let a = sol.value(s, self.table.as_deref())?;
            for c in 0..n {
                diff[i * n + c] = a[c] - self.reference.v[i * n + c];
            }
        }
        let field = LatticeField { window: rw.clone(), ncomp: n, values: diff };
        let s: f64 = bond_norm_samples(&self.model, &field, r_dom).iter().map(|(_, v)| v * v).sum();
        Ok(s.sqrt())
    }

    pub fn solve(&self, scheme: Scheme, radius: f64, opts: &SolverOptions) -> Result<CellSolution> {
        match scheme {
            Scheme::Clamped => solve_clamped(self.model.clone(), &self.predictor, radius, opts),
            Scheme::Augmented { p } => solve_augmented(self.model.clone(), &self.predictor, radius, p, self.table.as_deref(), opts),
        }
    }

    pub fn study(&self, scheme: Scheme, radii: &[f64], log_power: f64, opts: &SolverOptions) -> Result<ConvergenceStudy> {
        let rref = self.reference.report.radius;
        if radii.is_empty() || radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::ConfigInvalid("radii must be nonempty and strictly increasing".into()));
        }
        let rmax = *radii.last().unwrap();
        if rref < 3.0 * rmax {
            return Err(Error::ConfigInvalid(format!("reference radius {rref} must be at least 3 x {rmax}")));
        }
        let mut errors = Vec::new();
        let mut energies = Vec::new();
        for &r in radii {
            let sol = self.solve(scheme, r, opts)?;
            energies.push(sol.report.energy);
            errors.push(self.error(&sol)?);
        }
        let fit = power_fit(radii, &errors, log_power);
        let rep = &self.reference.report;
        Ok(ConvergenceStudy {
            scheme,
            radii: radii.to_vec(),
            errors,
            energies,
            fit,
            log_power,
            reference: ReferenceDescriptor {
                radius: rep.radius,
                r_out: rep.r_out,
                scheme: rep.scheme,
                gradient_norm: rep.gradient_norm,
                energy: rep.energy,
                multipole_dofs: rep.multipole_dofs.clone(),
            },
            error_domain_radius: rep.r_out,
        })
    }
}

/// Solves at each radius and fits the decay of the error against a reference.
pub fn convergence_study(
    model: Arc<DefectModel>,
    predictor: Arc<PredictorStack>,
    greens: Option<&LatticeGreens>,
    scheme: Scheme,
    radii: &[f64],
    reference_radius: f64,
    log_power: f64,
    opts: &SolverOptions,
) -> Result<ConvergenceStudy> {
    let ctx = StudyContext::new(model, predictor, greens, reference_radius, opts)?;
    ctx.study(scheme, radii, log_power, opts)
}

/// Wall clock that reads zero on wasm32, where `Instant` is unavailable.
struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Stopwatch {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        return 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correctors::{assemble_predictor, DefectKind};
    use crate::potentials::{build_model, make_defect_model, DefectSpec, Params};

    fn vacancy(name: &str) -> (Arc<DefectModel>, PredictorStack) {
        let host = build_model(name, &Params::new()).unwrap();
        let model = Arc::new(make_defect_model(host.clone(), &DefectSpec::vacancy()).unwrap());
        let pred = assemble_predictor(host.as_ref(), DefectKind::Point, 0, vec![], 1.0).unwrap();
        (model, pred)
    }

    #[test]
    fn homogeneous_lattice_is_at_rest() {
        let host = build_model("triangular-pair", &Params::new()).unwrap();
        let model = Arc::new(DefectModel::homogeneous(host.clone()));
        let pred = assemble_predictor(host.as_ref(), DefectKind::Point, 0, vec![], 1.0).unwrap();
        let problem = CellProblem::new(model, &pred, 6.0, Scheme::Clamped, None, None).unwrap();
        let (e, g) = problem.energy_and_gradient(&vec![0.0; problem.n_dofs()]).unwrap();
        assert_eq!(e, 0.0);
        assert!(norm(&g) < 1e-14);
        let sol = Arc::new(problem).solve(&SolverOptions::default(), None).unwrap();
        assert!(sol.report.iterations <= 1);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (model, pred) = vacancy("triangular-pair");
        let g = LatticeGreens::compute(model.host.as_ref(), 12.0, 256).unwrap();
        let table = GreenTable::build(&g, table_radius(model.lattice(), 12.0, 1)).unwrap();
        let problem = CellProblem::new(model, &pred, 5.0, Scheme::Augmented { p: 1 }, Some(10.0), Some(&table)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..problem.n_dofs()).map(|_| rng.random_range(-0.05..0.05)).collect();
        let (_, g0) = problem.energy_and_gradient(&x).unwrap();
        for _ in 0..5 {
            let d: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = 1e-5;
            let xp: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - h * b).collect();
            let fd = (problem.energy_and_gradient(&xp).unwrap().0 - problem.energy_and_gradient(&xm).unwrap().0) / (2.0 * h);
            let an = dot(&g0, &d);
            assert!((fd - an).abs() < 1e-6 * an.abs().max(1e-3), "{fd} vs {an}");
        }
    }

    #[test]
    fn interior_translation_leaves_energy_unchanged() {
        let (model, pred) = vacancy("triangular-pair");
        let problem = CellProblem::new(model.clone(), &pred, 10.0, Scheme::Clamped, None, None).unwrap();
        let lat = problem.lattice().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..problem.n_dofs()).map(|_| rng.random_range(-0.02..0.02)).collect();
        let v = problem.field(&x);
        let mut shifted = v.clone();
        for (i, s) in problem.window().sites().iter().enumerate() {
            if lat.norm(s) <= 7.0 && !model.is_removed(s) {
                shifted[i * 2] += 0.37;
                shifted[i * 2 + 1] -= 0.21;
            }
        }
        let interior: Vec<u32> = (0..problem.energy.len())
            .filter(|&e| {
                let s = problem.window().sites()[problem.energy[e] as usize];
                lat.norm(&s) <= 7.0 - lat.reach() - 1e-9 && !model.is_removed(&s)
            })
            .map(|e| e as u32)
            .collect();
        let mut gs = vec![0.0; v.len()];
        let (e0, _) = problem.accumulate(&interior, &v, &mut gs);
        let (e1, _) = problem.accumulate(&interior, &shifted, &mut gs);
        assert!(e0 != 0.0);
        assert!((e0 - e1 + 0.0).abs() < 1e-12 + 1e-12 * e0.abs(), "{e0} {e1}");
    }

    #[test]
    fn vacancy_relaxes_and_augmented_p0_equals_clamped() {
        let (model, pred) = vacancy("triangular-pair");
        let opts = SolverOptions::default();
        let a = solve_clamped(model.clone(), &pred, 10.0, &opts).unwrap();
        assert!(a.report.converged && a.report.gradient_norm < 1e-9);
        assert!(a.report.energy < 0.0);
        assert!(a.report.stability_ok, "ritz {} c0 {}", a.report.min_ritz_ratio, a.report.c0);
        let b = solve_augmented(model, &pred, 10.0, 0, None, &opts).unwrap();
        for (s, i) in a.window.sites().iter().zip(0..) {
            let j = b.window.index(s).unwrap();
            for c in 0..2 {
                assert!((a.v[i * 2 + c] - b.v[j * 2 + c]).abs() < 1e-10);
            }
        }
    }
}

