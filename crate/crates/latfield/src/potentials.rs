//! Site potentials, defect models and Cauchy-Born tensors.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{Lattice, Site};

/// A site energy V(g) for stencil arguments g laid out as `g[bond * N + comp]`.
///
/// `active` restricts the sum to surviving bonds (defect sites); `None` means all.
pub trait SitePotential: Send + Sync {
    fn lattice(&self) -> &Lattice;
    fn name(&self) -> String;
    fn energy(&self, g: &[f64], active: Option<&[bool]>) -> f64;
    /// Writes ∇V(g) into `out` and returns V(g).
    fn gradient(&self, g: &[f64], active: Option<&[bool]>, out: &mut [f64]) -> f64;
    /// Dense Hessian, (N|R|)² row-major.
    fn hessian(&self, g: &[f64]) -> Vec<f64>;
    /// Dense third derivative at g = 0, (N|R|)³.
    fn d3_at_zero(&self) -> Vec<f64>;
    /// Dense fourth derivative at g = 0, (N|R|)⁴.
    fn d4_at_zero(&self) -> Vec<f64>;
    /// True when V(g) is even in g, so odd derivatives at 0 vanish.
    fn is_even(&self) -> bool {
        false
    }
}

/// Scalar profile ψ for antiplane models, with derivatives through fourth order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Profile {
    /// (1 − cos 2πs)/(2π)², period 1.
    Sine,
    /// s²/2 + s³/3, violates point symmetry.
    Cubic,
    /// s²/2.
    Quadratic,
}

impl Profile {
    fn derivs(&self, s: f64) -> [f64; 5] {
        match self {
            Profile::Sine => {
                let t = 2.0 * PI * s;
                let (sn, cs) = t.sin_cos();
                [
                    (1.0 - cs) / (4.0 * PI * PI),
                    sn / (2.0 * PI),
                    cs,
                    -2.0 * PI * sn,
                    -4.0 * PI * PI * cs,
                ]
            }
            Profile::Cubic => [s * s / 2.0 + s * s * s / 3.0, s + s * s, 1.0 + 2.0 * s, 2.0, 0.0],
            Profile::Quadratic => [s * s / 2.0, s, 1.0, 0.0, 0.0],
        }
    }
}

/// How a single bond contributes: V = Σ_ρ v(ρ, g_ρ).
#[derive(Debug, Clone, Copy, Serialize)]
pub enum BondLaw {
    /// v = ½ψ(g_ρ), scalar displacements.
    Antiplane(Profile),
    /// v = ½φ(|ρ + g_ρ|) with φ(r) = ½k(r−r0)² + c3(r−r0)³.
    Pair { k: f64, c3: f64, r0: f64 },
}

/// Derivatives of r ↦ φ(r) for the pair law.
fn pair_phi(k: f64, c3: f64, r0: f64, r: f64) -> [f64; 5] {
    let x = r - r0;
    [
        0.5 * k * x * x + c3 * x * x * x,
        k * x + 3.0 * c3 * x * x,
        k + 6.0 * c3 * x,
        6.0 * c3,
        0.0,
    ]
}

/// Derivatives of s ↦ φ(√s) by univariate Faà di Bruno.
fn pair_outer(k: f64, c3: f64, r0: f64, s: f64) -> [f64; 5] {
    let t = s.sqrt();
    let p = pair_phi(k, c3, r0, t);
    let t1 = 0.5 / t;
    let t2 = -0.25 / (s * t);
    let t3 = 0.375 / (s * s * t);
    let t4 = -0.9375 / (s * s * s * t);
    [
        p[0],
        p[1] * t1,
        p[2] * t1 * t1 + p[1] * t2,
        p[3] * t1.powi(3) + 3.0 * p[2] * t1 * t2 + p[1] * t3,
        p[4] * t1.powi(4) + 6.0 * p[3] * t1 * t1 * t2 + p[2] * (3.0 * t2 * t2 + 4.0 * t1 * t3) + p[1] * t4,
    ]
}

impl BondLaw {
    /// Derivative tensors of one bond term up to `order` (full, N^k each).
    fn bond_derivs(&self, rho: &[f64; 3], g: &[f64], order: usize) -> Vec<Vec<f64>> {
        match *self {
            BondLaw::Antiplane(p) => {
                let d = p.derivs(g[0]);
                (0..=order).map(|k| vec![0.5 * d[k]]).collect()
            }
            BondLaw::Pair { k, c3, r0 } => {
                let n = g.len();
                let mut y = [0.0; 3];
                for a in 0..n {
                    y[a] = rho[a] + g[a];
                }
                let s: f64 = y[..n].iter().map(|v| v * v).sum();
                let f = pair_outer(k, c3, r0, s);
                let sa: Vec<f64> = (0..n).map(|a| 2.0 * y[a]).collect();
                let sab = |a: usize, b: usize| if a == b { 2.0 } else { 0.0 };
                let mut out = vec![vec![0.5 * f[0]]];
                if order >= 1 {
                    out.push((0..n).map(|a| 0.5 * f[1] * sa[a]).collect());
                }
                if order >= 2 {
                    let mut h = vec![0.0; n * n];
                    for a in 0..n {
                        for b in 0..n {
                            h[a * n + b] = 0.5 * (f[2] * sa[a] * sa[b] + f[1] * sab(a, b));
                        }
                    }
                    out.push(h);
                }
                if order >= 3 {
                    let mut t = vec![0.0; n * n * n];
                    for a in 0..n {
                        for b in 0..n {
                            for c in 0..n {
                                t[(a * n + b) * n + c] = 0.5
                                    * (f[3] * sa[a] * sa[b] * sa[c]
                                        + f[2] * (sab(a, b) * sa[c] + sab(a, c) * sa[b] + sab(b, c) * sa[a]));
                            }
                        }
                    }
                    out.push(t);
                }
                if order >= 4 {
                    let mut t = vec![0.0; n.pow(4)];
                    for a in 0..n {
                        for b in 0..n {
                            for c in 0..n {
                                for e in 0..n {
                                    let s4 = sa[a] * sa[b] * sa[c] * sa[e];
                                    let s3 = sab(a, b) * sa[c] * sa[e]
                                        + sab(a, c) * sa[b] * sa[e]
                                        + sab(a, e) * sa[b] * sa[c]
                                        + sab(b, c) * sa[a] * sa[e]
                                        + sab(b, e) * sa[a] * sa[c]
                                        + sab(c, e) * sa[a] * sa[b];
                                    let s2 = sab(a, b) * sab(c, e) + sab(a, c) * sab(b, e) + sab(a, e) * sab(b, c);
                                    t[((a * n + b) * n + c) * n + e] = 0.5 * (f[4] * s4 + f[3] * s3 + f[2] * s2);
                                }
                            }
                        }
                    }
                    out.push(t);
                }
                out
            }
        }
    }

    fn bond_value_grad(&self, rho: &[f64; 3], g: &[f64], grad: &mut [f64]) -> f64 {
        match *self {
            BondLaw::Antiplane(p) => {
                let d = p.derivs(g[0]);
                grad[0] = 0.5 * d[1];
                0.5 * d[0]
            }
            BondLaw::Pair { k, c3, r0 } => {
                let n = g.len();
                let mut y = [0.0; 3];
                let mut s = 0.0;
                for a in 0..n {
                    y[a] = rho[a] + g[a];
                    s += y[a] * y[a];
                }
                let r = s.sqrt();
                let p = pair_phi(k, c3, r0, r);
                for a in 0..n {
                    grad[a] = 0.5 * p[1] * y[a] / r;
                }
                0.5 * p[0]
            }
        }
    }
}

/// Site potential that is a sum of independent bond terms.
#[derive(Debug, Clone)]
pub struct BondSitePotential {
    lattice: Lattice,
    law: BondLaw,
    name: String,
}

impl BondSitePotential {
    pub fn new(lattice: Lattice, law: BondLaw, name: &str) -> Self {
        BondSitePotential { lattice, law, name: name.to_string() }
    }
    pub fn law(&self) -> BondLaw {
        self.law
    }

    fn dense_at(&self, g: &[f64], order: usize) -> Vec<f64> {
        let n = self.lattice.ncomp();
        let nb = self.lattice.stencil_len();
        let m = n * nb;
        let mut out = vec![0.0; m.pow(order as u32)];
        for b in 0..nb {
            let rho = &self.lattice.stencil_phys()[b];
            let t = &self.law.bond_derivs(rho, &g[b * n..(b + 1) * n], order)[order];
            for (f, v) in t.iter().enumerate() {
                // map local multi-index (comp indices) to global slots in bond b
                let mut rem = f;
                let mut idx = 0usize;
                let mut stride = 1usize;
                let mut parts = vec![0usize; order];
                for p in (0..order).rev() {
                    parts[p] = rem % n;
                    rem /= n;
                }
                for p in (0..order).rev() {
                    idx += (b * n + parts[p]) * stride;
                    stride *= m;
                }
                out[idx] += v;
            }
        }
        out
    }
}

impl SitePotential for BondSitePotential {
    fn lattice(&self) -> &Lattice {
        &self.lattice
    }
    fn name(&self) -> String {
        self.name.clone()
    }
    fn energy(&self, g: &[f64], active: Option<&[bool]>) -> f64 {
        let n = self.lattice.ncomp();
        let mut scratch = [0.0; 3];
        let mut e = 0.0;
        for b in 0..self.lattice.stencil_len() {
            if active.is_some_and(|a| !a[b]) {
                continue;
            }
            e += self.law.bond_value_grad(&self.lattice.stencil_phys()[b], &g[b * n..(b + 1) * n], &mut scratch[..n]);
        }
        e
    }
    fn gradient(&self, g: &[f64], active: Option<&[bool]>, out: &mut [f64]) -> f64 {
        let n = self.lattice.ncomp();
        let mut e = 0.0;
        for b in 0..self.lattice.stencil_len() {
            let o = &mut out[b * n..(b + 1) * n];
            if active.is_some_and(|a| !a[b]) {
                o.fill(0.0);
                continue;
            }
            e += self.law.bond_value_grad(&self.lattice.stencil_phys()[b], &g[b * n..(b + 1) * n], o);
        }
        e
    }
    fn hessian(&self, g: &[f64]) -> Vec<f64> {
        self.dense_at(g, 2)
    }
    fn d3_at_zero(&self) -> Vec<f64> {
        let z = vec![0.0; self.lattice.ncomp() * self.lattice.stencil_len()];
        self.dense_at(&z, 3)
    }
    fn d4_at_zero(&self) -> Vec<f64> {
        let z = vec![0.0; self.lattice.ncomp() * self.lattice.stencil_len()];
        self.dense_at(&z, 4)
    }
    fn is_even(&self) -> bool {
        matches!(self.law, BondLaw::Antiplane(Profile::Sine) | BondLaw::Antiplane(Profile::Quadratic))
    }
}

/// Model parameters as given in configuration files.
pub type Params = BTreeMap<String, f64>;

fn param(p: &Params, key: &str, default: f64) -> f64 {
    p.get(key).copied().unwrap_or(default)
}

pub const MODEL_NAMES: &[&str] =
    &["antiplane-sine", "antiplane-cubic", "antiplane-quadratic", "triangular-pair", "square-pair", "cubic-sine"];

/// Build a registered model by name.
pub fn build_model(name: &str, params: &Params) -> Result<Arc<dyn SitePotential>> {
    let allowed: &[&str] = match name {
        "triangular-pair" | "square-pair" => &["k", "c3", "r0"],
        _ => &[],
    };
    for key in params.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(Error::ConfigInvalid(format!("model '{name}' has no parameter '{key}'")));
        }
    }
    let m: Arc<dyn SitePotential> = match name {
        "antiplane-sine" => Arc::new(BondSitePotential::new(Lattice::square_nn(1), BondLaw::Antiplane(Profile::Sine), name)),
        "antiplane-cubic" => Arc::new(BondSitePotential::new(Lattice::square_nn(1), BondLaw::Antiplane(Profile::Cubic), name)),
        "antiplane-quadratic" => {
            Arc::new(BondSitePotential::new(Lattice::square_nn(1), BondLaw::Antiplane(Profile::Quadratic), name))
        }
        "cubic-sine" => Arc::new(BondSitePotential::new(Lattice::cubic_nn(1), BondLaw::Antiplane(Profile::Sine), name)),
        "triangular-pair" => {
            let law = BondLaw::Pair { k: param(params, "k", 1.0), c3: param(params, "c3", -0.3), r0: param(params, "r0", 0.9) };
            Arc::new(BondSitePotential::new(Lattice::triangular_nn(2), law, name))
        }
        "square-pair" => {
            let law = BondLaw::Pair { k: param(params, "k", 1.0), c3: param(params, "c3", -0.3), r0: param(params, "r0", 1.0) };
            Arc::new(BondSitePotential::new(Lattice::square_nn(2), law, name))
        }
        _ => return Err(Error::UnknownModel(name.to_string())),
    };
    Ok(m)
}

/// Evaluate V, ∇V or ∇²V at g.
pub enum SiteValue {
    Value(f64),
    Gradient(Vec<f64>),
    Hessian(Vec<f64>),
}

pub fn eval_site(v: &dyn SitePotential, g: &[f64], order: usize) -> Result<SiteValue> {
    match order {
        0 => Ok(SiteValue::Value(v.energy(g, None))),
        1 => {
            let mut out = vec![0.0; g.len()];
            v.gradient(g, None, &mut out);
            Ok(SiteValue::Gradient(out))
        }
        2 => Ok(SiteValue::Hessian(v.hessian(g))),
        k => Err(Error::UnsupportedOrder(k)),
    }
}

/// ∇²V(0) split into N×N blocks: `blocks[ρ][σ]` row-major.
pub fn hessian_blocks(v: &dyn SitePotential) -> Vec<Vec<Vec<f64>>> {
    let lat = v.lattice();
    let n = lat.ncomp();
    let nb = lat.stencil_len();
    let m = n * nb;
    let h = v.hessian(&vec![0.0; m]);
    (0..nb)
        .map(|r| {
            (0..nb)
                .map(|s| {
                    let mut blk = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            blk[i * n + j] = h[(r * n + i) * m + s * n + j];
                        }
                    }
                    blk
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SymmetryReport {
    pub trials: usize,
    pub max_residual: f64,
    pub pass: bool,
}

/// Point-symmetry check V(A) = V((−A_{−ρ})_ρ) on random arguments.
pub fn validate_symmetry(v: &dyn SitePotential, trials: usize, seed: u64) -> SymmetryReport {
    let lat = v.lattice();
    let n = lat.ncomp();
    let nb = lat.stencil_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut a = vec![0.0; n * nb];
    let mut b = vec![0.0; n * nb];
    for t in 0..trials.max(1) {
        for x in a.iter_mut() {
            *x = rng.random_range(-0.4..0.4);
        }
        if t == 0 {
            // a deterministic probe along a single bond
            a.fill(0.0);
            a[0] = 1.0;
        }
        for r in 0..nb {
            let m = lat.neg_index(r);
            for i in 0..n {
                b[r * n + i] = -a[m * n + i];
            }
        }
        let va = v.energy(&a, None);
        let vb = v.energy(&b, None);
        worst = worst.max((va - vb).abs() / va.abs().max(1.0));
    }
    SymmetryReport { trials: trials.max(1), max_residual: worst, pass: worst <= 1e-10 }
}

/// Smallest eigenvalue of a symmetric N×N matrix.
pub fn min_eigenvalue(m: &[f64], n: usize) -> f64 {
    match n {
        1 => m[0],
        2 => {
            let (a, b, d) = (m[0], 0.5 * (m[1] + m[2]), m[3]);
            0.5 * (a + d) - (0.25 * (a - d) * (a - d) + b * b).sqrt()
        }
        _ => {
            let mat = nalgebra::DMatrix::from_row_slice(n, n, m);
            let sym = 0.5 * (&mat + mat.transpose());
            sym.symmetric_eigenvalues().min()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub c0: f64,
    pub grid: usize,
    pub argmin: Vec<f64>,
}

/// Grid estimate of min λ_min(Ĥ(k)) / (½ Σ_ρ 4 sin²(k·ρ/2)) over k ≠ 0.
pub fn stability_constant(v: &dyn SitePotential, grid: usize) -> StabilityReport {
    let ms = crate::fourier::MultiplierSeries::new(v);
    let lat = v.lattice();
    let d = lat.dim();
    let n = lat.ncomp();
    let total = grid.pow(d as u32);
    let mut best = f64::INFINITY;
    let mut argmin = vec![0.0; d];
    let mut h = vec![0.0; n * n];
    for f in 1..total {
        let mut q = [0.0; 3];
        let mut rem = f;
        for qi in q.iter_mut().take(d) {
            *qi = 2.0 * PI * (rem % grid) as f64 / grid as f64;
            rem /= grid;
        }
        ms.multiplier_reduced(&q, &mut h);
        let norm: f64 = lat
            .stencil()
            .iter()
            .map(|r| {
                let t: f64 = (0..d).map(|a| q[a] * r[a] as f64).sum();
                2.0 * (0.5 * t).sin().powi(2)
            })
            .sum();
        let ratio = min_eigenvalue(&h, n) / norm;
        if ratio < best {
            best = ratio;
            argmin = q[..d].to_vec();
        }
    }
    StabilityReport { c0: best, grid, argmin }
}

/// Cauchy-Born tensors with slot index `comp * d + dir`.
#[derive(Debug, Clone, Serialize)]
pub struct CauchyBorn {
    pub d: usize,
    pub n: usize,
    pub w0: f64,
    /// ℂ, (Nd)² row-major.
    pub c: Vec<f64>,
    /// ∇³W(0), (Nd)³.
    pub w3: Vec<f64>,
    /// ∇⁴W(0), (Nd)⁴.
    pub w4: Vec<f64>,
}

pub fn cauchy_born(v: &dyn SitePotential) -> CauchyBorn {
    let lat = v.lattice();
    let d = lat.dim();
    let n = lat.ncomp();
    let nb = lat.stencil_len();
    let m = n * nb;
    let s = n * d;
    let cv = lat.c_vol();
    let rho = lat.stencil_phys();
    let w0 = v.energy(&vec![0.0; m], None) / cv;
    // contract a dense derivative tensor of order k with stencil vectors
    let contract = |dense: &[f64], k: usize| -> Vec<f64> {
        let mut out = vec![0.0; s.pow(k as u32)];
        for (f, val) in dense.iter().enumerate() {
            if *val == 0.0 {
                continue;
            }
            let mut rem = f;
            let mut parts = vec![(0usize, 0usize); k];
            for p in (0..k).rev() {
                let g = rem % m;
                rem /= m;
                parts[p] = (g / n, g % n);
            }
            // distribute over directions a_1..a_k
            for df in 0..d.pow(k as u32) {
                let mut r2 = df;
                let mut w = *val;
                let mut idx = 0usize;
                let mut dirs = vec![0usize; k];
                for p in (0..k).rev() {
                    dirs[p] = r2 % d;
                    r2 /= d;
                }
                for p in 0..k {
                    let (b, i) = parts[p];
                    w *= rho[b][dirs[p]];
                    idx = idx * s + i * d + dirs[p];
                }
                out[idx] += w / cv;
            }
        }
        out
    };
    let z = vec![0.0; m];
    let c = contract(&v.hessian(&z), 2);
    let w3 = contract(&v.d3_at_zero(), 3);
    let w4 = contract(&v.d4_at_zero(), 4);
    CauchyBorn { d, n, w0, c, w3, w4 }
}

impl CauchyBorn {
    pub fn cijkl(&self, i: usize, a: usize, j: usize, b: usize) -> f64 {
        let s = self.n * self.d;
        self.c[(i * self.d + a) * s + j * self.d + b]
    }

    /// Minimum of ℂ[a⊗n, a⊗n] over unit a, n on an angular grid (Legendre-Hadamard).
    pub fn legendre_hadamard_min(&self, grid: usize) -> f64 {
        let dirs = |dim: usize| -> Vec<Vec<f64>> {
            match dim {
                1 => vec![vec![1.0]],
                2 => (0..grid)
                    .map(|t| {
                        let th = PI * t as f64 / grid as f64;
                        vec![th.cos(), th.sin()]
                    })
                    .collect(),
                _ => {
                    let mut v = Vec::new();
                    for t in 0..grid {
                        for p in 0..2 * grid {
                            let th = PI * (t as f64 + 0.5) / grid as f64;
                            let ph = PI * p as f64 / grid as f64;
                            v.push(vec![th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()]);
                        }
                    }
                    v
                }
            }
        };
        let mut best = f64::INFINITY;
        for a in dirs(self.n) {
            for nn in dirs(self.d) {
                let mut q = 0.0;
                for i in 0..self.n {
                    for al in 0..self.d {
                        for j in 0..self.n {
                            for be in 0..self.d {
                                q += self.cijkl(i, al, j, be) * a[i] * nn[al] * a[j] * nn[be];
                            }
                        }
                    }
                }
                best = best.min(q);
            }
        }
        best
    }

    pub fn max_abs_w3(&self) -> f64 {
        self.w3.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Defect description: removed sites and replaced site potentials near the core.
#[derive(Clone, Default)]
pub struct DefectSpec {
    pub radius: f64,
    pub removed: Vec<Site>,
    pub overrides: Vec<(Site, Arc<dyn SitePotential>)>,
}

impl DefectSpec {
    pub fn vacancy() -> Self {
        DefectSpec { radius: 1.0, removed: vec![[0, 0, 0]], overrides: Vec::new() }
    }
}

#[derive(Clone)]
pub struct DefectModel {
    pub host: Arc<dyn SitePotential>,
    pub radius: f64,
    removed: HashSet<Site>,
    overrides: HashMap<Site, Arc<dyn SitePotential>>,
    masks: HashMap<Site, Vec<bool>>,
}

pub fn make_defect_model(host: Arc<dyn SitePotential>, spec: &DefectSpec) -> Result<DefectModel> {
    let lat = host.lattice().clone();
    let check = |s: &Site| -> Result<()> {
        if lat.norm(s) > spec.radius + 1e-12 {
            Err(Error::DefectOutsideRadius(s[..lat.dim()].to_vec()))
        } else {
            Ok(())
        }
    };
    for s in &spec.removed {
        check(s)?;
    }
    for (s, _) in &spec.overrides {
        check(s)?;
    }
    let removed: HashSet<Site> = spec.removed.iter().copied().collect();
    let mut masks = HashMap::new();
    for r in &removed {
        for (b, rho) in lat.stencil().iter().enumerate() {
            // the site r − ρ loses its bond ρ
            let s = crate::lattice::sub(r, rho);
            if removed.contains(&s) {
                continue;
            }
            let m = masks.entry(s).or_insert_with(|| vec![true; lat.stencil_len()]);
            m[b] = false;
        }
    }
    Ok(DefectModel {
        host,
        radius: spec.radius,
        removed,
        overrides: spec.overrides.iter().cloned().collect(),
        masks,
    })
}

impl DefectModel {
    pub fn homogeneous(host: Arc<dyn SitePotential>) -> Self {
        make_defect_model(host, &DefectSpec::default()).expect("empty defect")
    }
    pub fn lattice(&self) -> &Lattice {
        self.host.lattice()
    }
    pub fn is_removed(&self, s: &Site) -> bool {
        self.removed.contains(s)
    }
    pub fn removed(&self) -> impl Iterator<Item = &Site> {
        self.removed.iter()
    }
    /// Surviving-bond mask, `None` when the full stencil is active.
    pub fn mask(&self, s: &Site) -> Option<&[bool]> {
        self.masks.get(s).map(|v| v.as_slice())
    }
    pub fn site_potential(&self, s: &Site) -> &dyn SitePotential {
        self.overrides.get(s).map(|p| p.as_ref()).unwrap_or(self.host.as_ref())
    }
    /// Indices of the surviving stencil directions at `s`.
    pub fn reduced_stencil(&self, s: &Site) -> Vec<usize> {
        match self.mask(s) {
            None => (0..self.lattice().stencil_len()).collect(),
            Some(m) => (0..m.len()).filter(|&b| m[b]).collect(),
        }
    }
    pub fn is_homogeneous(&self) -> bool {
        self.removed.is_empty() && self.overrides.is_empty()
    }
}
