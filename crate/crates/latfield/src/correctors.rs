//! Continuum far-field predictors for scalar (antiplane) models: the screw
//! dislocation solution of linear elasticity, the corrector right-hand sides,
//! a polar-mode solver for the corrector equations and predictor assembly.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::KernelSet;
use crate::lattice::{Lattice, LatticeField, Site, Window};
use crate::multipole::ContinuumMultipole;
use crate::polar::{PolarJet, PolarSeries, PolarTerm};
use crate::potentials::{cauchy_born, hessian_blocks, CauchyBorn, SitePotential};

/// Derivative tensors of a scalar field; `jet(x, k)[j]` is ∇ʲu(x) in full
/// row-major layout (d^j entries) for j = 0..=k.
pub trait ContinuumField: Send + Sync {
    fn dim(&self) -> usize;
    /// Highest derivative order served.
    fn jet_order(&self) -> usize;
    fn jet(&self, x: &[f64], order: usize) -> Result<Vec<Vec<f64>>>;
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.jet(x, 0)?[0][0])
    }
    /// u(y) − u(x); fields with a branch cut override this.
    fn difference(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.value(y)? - self.value(x)?)
    }
    fn is_zero(&self) -> bool {
        false
    }
    fn describe(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

#[derive(Debug, Clone)]
pub struct ZeroField {
    pub dim: usize,
}

impl ContinuumField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn jet_order(&self) -> usize {
        usize::MAX
    }
    fn jet(&self, _x: &[f64], order: usize) -> Result<Vec<Vec<f64>>> {
        Ok((0..=order).map(|j| vec![0.0; self.dim.pow(j as u32)]).collect())
    }
    fn is_zero(&self) -> bool {
        true
    }
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "zero" })
    }
}

fn sym2(c: &[f64]) -> Matrix2<f64> {
    Matrix2::new(c[0], 0.5 * (c[1] + c[2]), 0.5 * (c[1] + c[2]), c[3])
}

/// ℂ^{1/2} and ℂ^{−1/2} for a symmetric positive definite 2×2 ℂ.
fn sqrt_pair(c: &[f64]) -> Result<(Matrix2<f64>, Matrix2<f64>)> {
    let eig = sym2(c).symmetric_eigen();
    if eig.eigenvalues.iter().any(|l| *l <= 0.0) {
        return Err(Error::UnstableModel(eig.eigenvalues.min()));
    }
    let v = eig.eigenvectors;
    let s = Matrix2::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let si = Matrix2::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok((v * s * v.transpose(), v * si * v.transpose()))
}

fn scalar_c(cb: &CauchyBorn) -> Result<Vec<f64>> {
    if cb.n != 1 {
        return Err(Error::NonScalarOperator(cb.n));
    }
    if cb.d != 2 {
        return Err(Error::Unsupported(format!("scalar far-field operator in dimension {}", cb.d)));
    }
    Ok(cb.c.clone())
}

/// Screw dislocation: Burgers vector magnitude and core position.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScrewSpec {
    pub burgers: f64,
    pub core: [f64; 2],
}

impl Default for ScrewSpec {
    fn default() -> Self {
        ScrewSpec { burgers: 1.0, core: [0.3, 0.45] }
    }
}

/// Rejects cores whose branch cut {x₂ = x̂₂, x₁ ≥ x̂₁} meets a lattice site.
pub fn check_branch_cut(lattice: &Lattice, spec: &ScrewSpec) -> Result<()> {
    let a = lattice.basis();
    let hw = 512i64;
    let hit = |n1: i64, n2: i64| {
        let x = a[0][0] * n1 as f64 + a[0][1] * n2 as f64;
        let y = a[1][0] * n1 as f64 + a[1][1] * n2 as f64;
        (y - spec.core[1]).abs() < 1e-12 && x >= spec.core[0] - 1e-12
    };
    if a[1][0] == 0.0 {
        let t = spec.core[1] / a[1][1];
        if (t - t.round()).abs() < 1e-12 {
            return Err(Error::ConfigInvalid("branch cut passes through lattice sites".into()));
        }
        return Ok(());
    }
    for n1 in -hw..=hw {
        for n2 in -hw..=hw {
            if hit(n1, n2) {
                return Err(Error::ConfigInvalid("branch cut passes through lattice sites".into()));
            }
        }
    }
    Ok(())
}

/// u_CLE(x) = (b/2π)·arg(ℂ^{−1/2}(x − x̂)), with the branch on the image of Γ.
#[derive(Debug, Clone)]
pub struct ScrewCle {
    pub spec: ScrewSpec,
    /// z = w·(x − x̂).
    w: [Complex64; 2],
    alpha0: f64,
}

pub fn u_cle_screw(model: &dyn SitePotential, spec: &ScrewSpec) -> Result<ScrewCle> {
    let cb = cauchy_born(model);
    if cb.n != 1 {
        return Err(Error::AnisotropyUnsupported(format!(
            "screw solution for {} components needs a Stroh construction",
            cb.n
        )));
    }
    if cb.d != 2 {
        return Err(Error::Unsupported("screw dislocations are two-dimensional".into()));
    }
    check_branch_cut(model.lattice(), spec)?;
    let (_, cih) = sqrt_pair(&cb.c)?;
    let w = [Complex64::new(cih[(0, 0)], cih[(1, 0)]), Complex64::new(cih[(0, 1)], cih[(1, 1)])];
    Ok(ScrewCle { spec: *spec, w, alpha0: w[0].arg() })
}

impl ScrewCle {
    fn z(&self, x: &[f64]) -> Complex64 {
        self.w[0] * (x[0] - self.spec.core[0]) + self.w[1] * (x[1] - self.spec.core[1])
    }
    fn amp(&self) -> f64 {
        self.spec.burgers / (2.0 * PI)
    }
}

impl ContinuumField for ScrewCle {
    fn dim(&self) -> usize {
        2
    }
    fn jet_order(&self) -> usize {
        usize::MAX
    }
    fn jet(&self, x: &[f64], order: usize) -> Result<Vec<Vec<f64>>> {
        let z = self.z(x);
        if z.norm() == 0.0 {
            return Err(Error::SingularArgument(0));
        }
        let mut out = Vec::with_capacity(order + 1);
        out.push(vec![self.amp() * (z.arg() - self.alpha0).rem_euclid(2.0 * PI)]);
        let mut zinv_pow = Complex64::new(1.0, 0.0);
        let mut fact = 1.0;
        for k in 1..=order {
            zinv_pow /= z;
            if k > 1 {
                fact *= (k - 1) as f64;
            }
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            let base = zinv_pow * (sign * fact);
            let lvl: Vec<f64> = (0..1usize << k)
                .map(|f| {
                    let mut c = base;
                    for t in 0..k {
                        c *= self.w[(f >> t) & 1];
                    }
                    self.amp() * c.im
                })
                .collect();
            out.push(lvl);
        }
        Ok(out)
    }
    fn difference(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let (zx, zy) = (self.z(x), self.z(y));
        if zx.norm() == 0.0 || zy.norm() == 0.0 {
            return Err(Error::SingularArgument(0));
        }
        // shortest angular difference; bond vectors never wind around the core
        let d = (zy / zx).arg();
        Ok(self.amp() * d)
    }
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "screw_cle", "burgers": self.spec.burgers, "core": self.spec.core })
    }
}

/// ∇ʲ in x from ∇ʲ in y = T(x − x̂): contract every slot with T.
fn pull_back(t: &[f64], tm: &Matrix2<f64>, j: usize) -> Vec<f64> {
    let mut cur = t.to_vec();
    for slot in 0..j {
        let stride = 1usize << (j - 1 - slot);
        let mut next = vec![0.0; cur.len()];
        for (f, o) in next.iter_mut().enumerate() {
            let a = (f / stride) & 1;
            let base = f & !(stride);
            for b in 0..2 {
                *o += tm[(b, a)] * cur[base | (b * stride)];
            }
        }
        cur = next;
    }
    cur
}

/// Polar series in y = ℂ^{−1/2}(x − x̂), valid for |y| ≥ r_min.
#[derive(Debug, Clone, Serialize)]
pub struct PolarField {
    pub series: PolarSeries,
    pub center: [f64; 2],
    pub r_min: f64,
    /// Mean squared relative residual of the radial fits.
    pub fit_residual: f64,
    pub angular_nodes: usize,
    #[serde(skip)]
    jet: Option<PolarJet>,
    #[serde(skip)]
    t: Matrix2<f64>,
}

pub const FIELD_JET_ORDER: usize = 4;

impl PolarField {
    fn y(&self, x: &[f64]) -> (f64, f64) {
        let d = [x[0] - self.center[0], x[1] - self.center[1]];
        (self.t[(0, 0)] * d[0] + self.t[(0, 1)] * d[1], self.t[(1, 0)] * d[0] + self.t[(1, 1)] * d[1])
    }
}

impl ContinuumField for PolarField {
    fn dim(&self) -> usize {
        2
    }
    fn jet_order(&self) -> usize {
        FIELD_JET_ORDER
    }
    fn jet(&self, x: &[f64], order: usize) -> Result<Vec<Vec<f64>>> {
        if order > FIELD_JET_ORDER {
            return Err(Error::UnsupportedOrder(order));
        }
        let (y1, y2) = self.y(x);
        if y1.hypot(y2) < 0.5 * self.r_min {
            return Err(Error::EvaluationDomainExceeded(format!(
                "far-field corrector evaluated at |y| = {} below {}",
                y1.hypot(y2),
                0.5 * self.r_min
            )));
        }
        let jet = self.jet.as_ref().expect("jet built");
        Ok((0..=order).map(|j| pull_back(&jet.tensor(j, y1, y2), &self.t, j)).collect())
    }
    fn is_zero(&self) -> bool {
        self.series.terms.is_empty()
    }
    fn describe(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

/// Continuum multipole Σ a : ∇ⁱGₙ as a scalar field.
pub struct MultipoleField {
    pub cm: ContinuumMultipole,
    pub kernels: Arc<KernelSet>,
}

impl ContinuumField for MultipoleField {
    fn dim(&self) -> usize {
        self.cm.dim
    }
    fn jet_order(&self) -> usize {
        crate::kernels::DEFAULT_JET_ORDER.saturating_sub(self.cm.p.saturating_sub(1))
    }
    fn jet(&self, x: &[f64], order: usize) -> Result<Vec<Vec<f64>>> {
        if self.cm.ncomp != 1 {
            return Err(Error::NonScalarOperator(self.cm.ncomp));
        }
        let d = self.cm.dim;
        let mut out: Vec<Vec<f64>> = (0..=order).map(|q| vec![0.0; d.pow(q as u32)]).collect();
        for kn in 0..=self.cm.kernel_order() {
            let kernel = self.kernels.get(kn)?;
            for (m, per_k) in self.cm.a.iter().enumerate() {
                if 2 * kn + m + 1 > self.cm.p || per_k[0].iter().all(|v| *v == 0.0) {
                    continue;
                }
                for (q, lvl) in out.iter_mut().enumerate() {
                    let g = kernel.eval(x, m + q)?;
                    let wq = d.pow(q as u32);
                    for (slot, a) in per_k[0].iter().enumerate() {
                        for s in 0..wq {
                            lvl[s] += a * g[slot * wq + s];
                        }
                    }
                }
            }
        }
        Ok(out)
    }
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "continuum_multipole", "p": self.cm.p, "a": self.cm.a })
    }
}

/// Weight tensor K with H_SG[u] = K : ∇⁴u.
#[derive(Debug, Clone)]
pub struct StrainGradient {
    pub dim: usize,
    pub weights: Vec<f64>,
}

impl StrainGradient {
    /// (1/12c_vol) Σ_{σ,ρ} ∇²V(0)_{σρ}(3∇⁴u[σσρρ] − 2∇⁴u[σρρρ] − 2∇⁴u[σσσρ]).
    pub fn new(model: &dyn SitePotential) -> Result<Self> {
        let lat = model.lattice();
        if lat.ncomp() != 1 {
            return Err(Error::NonScalarOperator(lat.ncomp()));
        }
        let d = lat.dim();
        let blocks = hessian_blocks(model);
        let rho = lat.stencil_phys();
        let mut w = vec![0.0; d.pow(4)];
        let outer = |vs: [&[f64; 3]; 4], c: f64, w: &mut [f64]| {
            for (f, o) in w.iter_mut().enumerate() {
                let mut p = c;
                let mut rem = f;
                for t in (0..4).rev() {
                    p *= vs[t][rem % d];
                    rem /= d;
                }
                *o += p;
            }
        };
        let pre = 1.0 / (12.0 * lat.c_vol());
        for (s, sig) in rho.iter().enumerate() {
            for (r, rh) in rho.iter().enumerate() {
                let h = blocks[s][r][0] * pre;
                if h == 0.0 {
                    continue;
                }
                outer([sig, sig, rh, rh], 3.0 * h, &mut w);
                outer([sig, rh, rh, rh], -2.0 * h, &mut w);
                outer([sig, sig, sig, rh], -2.0 * h, &mut w);
            }
        }
        Ok(StrainGradient { dim: d, weights: w })
    }

    pub fn apply_tensor(&self, d4: &[f64]) -> f64 {
        self.weights.iter().zip(d4).map(|(a, b)| a * b).sum()
    }
}

pub fn apply_h_sg(model: &dyn SitePotential, u: &dyn ContinuumField, x: &[f64]) -> Result<f64> {
    let sg = StrainGradient::new(model)?;
    Ok(sg.apply_tensor(&u.jet(x, 4)?[4]))
}

/// −div(ℂ∇u)(x) for a scalar field.
pub fn apply_h_c(cb: &CauchyBorn, u: &dyn ContinuumField, x: &[f64]) -> Result<f64> {
    let d = cb.d;
    let h = &u.jet(x, 2)?[2];
    Ok(-cb.c.iter().zip(h).take(d * d).map(|(a, b)| a * b).sum::<f64>())
}

/// Right-hand side 𝒮ᵢ of the corrector equation H^C[uᵢ] = 𝒮ᵢ.
pub struct RhsField {
    pub order: usize,
    pub dim: usize,
    cb: CauchyBorn,
    sg: Option<StrainGradient>,
    u0: Option<Arc<dyn ContinuumField>>,
    /// ∇u₁^C + ∇u₁^CMP enters 𝒮₂ (d = 2).
    u1: Vec<Arc<dyn ContinuumField>>,
    pub provenance: String,
    zero: bool,
}

impl RhsField {
    fn scalar_terms(&self, x: &[f64]) -> Result<f64> {
        let d = self.dim;
        let w3 = &self.cb.w3;
        let w4 = &self.cb.w4;
        let u0 = self.u0.as_ref().expect("u0 present");
        match self.order {
            1 => {
                let j = u0.jet(x, 2)?;
                let (g, h) = (&j[1], &j[2]);
                let mut s = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        for c in 0..d {
                            s += w3[(a * d + b) * d + c] * h[a * d + b] * g[c];
                        }
                    }
                }
                Ok(s)
            }
            2 => {
                let j = u0.jet(x, 4)?;
                let (g, h) = (&j[1], &j[2]);
                let mut s = 0.0;
                if !self.u1.is_empty() {
                    let mut g1 = vec![0.0; d];
                    let mut h1 = vec![0.0; d * d];
                    for f in &self.u1 {
                        let jf = f.jet(x, 2)?;
                        for (o, v) in g1.iter_mut().zip(&jf[1]) {
                            *o += v;
                        }
                        for (o, v) in h1.iter_mut().zip(&jf[2]) {
                            *o += v;
                        }
                    }
                    for a in 0..d {
                        for b in 0..d {
                            for c in 0..d {
                                let t = w3[(a * d + b) * d + c];
                                s += t * (h[a * d + b] * g1[c] + g[b] * h1[a * d + c]);
                            }
                        }
                    }
                }
                for a in 0..d {
                    for b in 0..d {
                        for c in 0..d {
                            for e in 0..d {
                                s += 0.5 * w4[((a * d + b) * d + c) * d + e] * h[a * d + b] * g[c] * g[e];
                            }
                        }
                    }
                }
                if let Some(sg) = &self.sg {
                    s -= sg.apply_tensor(&j[4]);
                }
                Ok(s)
            }
            _ => Ok(0.0),
        }
    }
}

impl ContinuumField for RhsField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn jet_order(&self) -> usize {
        0
    }
    fn jet(&self, x: &[f64], order: usize) -> Result<Vec<Vec<f64>>> {
        if order > 0 {
            return Err(Error::UnsupportedOrder(order));
        }
        if self.zero {
            return Ok(vec![vec![0.0]]);
        }
        Ok(vec![vec![self.scalar_terms(x)?]])
    }
    fn is_zero(&self) -> bool {
        self.zero
    }
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "rhs", "order": self.order, "provenance": self.provenance })
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |s, x| s.max(x.abs()))
}

/// 𝒮ᵢ from the stack built so far: 𝒮₀ = 0; in d = 2 𝒮₁ = ½div(∇³W(0)[∇u₀]²) and
/// 𝒮₂ = div(∇³W(0)[∇u₀, ∇u₁ + ∇u₁^CMP]) + (1/6)div(∇⁴W(0)[∇u₀]³) − H_SG[u₀];
/// in d = 3 only 𝒮₂ = ½div(∇³W(0)[∇u₀]²) − H_SG[u₀] is non-zero.
pub fn build_rhs_s(model: &dyn SitePotential, i: usize, stack: &PredictorStack) -> Result<RhsField> {
    let cb = cauchy_born(model);
    let d = cb.d;
    let mk = |order: usize, zero: bool, provenance: &str| RhsField {
        order,
        dim: d,
        cb: cb.clone(),
        sg: None,
        u0: None,
        u1: Vec::new(),
        provenance: provenance.into(),
        zero,
    };
    if i == 0 {
        return Ok(mk(0, true, "S0 = 0"));
    }
    if i > 2 {
        return Err(Error::UnsupportedOrder(i));
    }
    if d == 3 && i == 1 {
        return Ok(mk(1, true, "S1 = 0 in three dimensions"));
    }
    if cb.n != 1 {
        return Err(Error::NonScalarOperator(cb.n));
    }
    let u0 = stack.correctors.first().cloned().ok_or_else(|| Error::MissingPredecessor("u0".into()))?;
    if d == 3 {
        // the three-dimensional grouping shifts the quadratic term into S2
        if !u0.is_zero() {
            return Err(Error::Unsupported("three-dimensional correctors of a non-zero u0".into()));
        }
        return Ok(mk(2, true, "S2 = 0 for u0 = 0"));
    }
    let w3_zero = max_abs(&cb.w3) == 0.0;
    if i == 1 {
        let zero = u0.is_zero() || w3_zero;
        let mut r = mk(1, zero, "S1 = 1/2 div(D3W(0)[grad u0]^2)");
        if !zero {
            r.u0 = Some(u0);
        }
        return Ok(r);
    }
    let mut u1 = Vec::new();
    if !w3_zero && !u0.is_zero() {
        let c1 = stack.correctors.get(1).cloned().ok_or_else(|| Error::MissingPredecessor("u1^C".into()))?;
        let m1 = stack
            .multipoles
            .get(1)
            .cloned()
            .flatten()
            .ok_or_else(|| Error::MissingPredecessor("u1^CMP".into()))?;
        for f in [c1, m1] {
            if !f.is_zero() {
                u1.push(f);
            }
        }
    }
    let zero = u0.is_zero();
    let mut r = mk(
        2,
        zero,
        "S2 = div(D3W(0)[grad u0, grad u1 + grad u1^CMP]) + 1/6 div(D4W(0)[grad u0]^3) - H_SG[u0]",
    );
    if !zero {
        r.u0 = Some(u0);
        r.u1 = u1;
        r.sg = Some(StrainGradient::new(model)?);
    }
    Ok(r)
}

/// Decay data of a corrector right-hand side: f ~ |x|^{gamma}·log^{log_pow}|x|.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FarFieldSpec {
    pub r0: f64,
    pub gamma: i32,
    pub log_pow: u32,
    /// Extra radial powers γ−1, γ−2, … in the fit.
    pub extra_powers: u32,
    pub center: [f64; 2],
}

/// Coefficients β_j of v = Σ β_j r^s log^j r with L_m v = Σ t_j r^{s−2} log^j r.
fn radial_particular(s: f64, m: i32, t: &[Complex64]) -> Vec<Complex64> {
    let k = t.len();
    let a = s * s - (m as f64) * (m as f64);
    let b = 2.0 * s;
    let mut beta = vec![Complex64::new(0.0, 0.0); k + 2];
    if a.abs() > 1e-12 {
        for j in (0..k).rev() {
            let mut rhs = t[j];
            rhs -= beta[j + 1] * (b * (j + 1) as f64);
            rhs -= beta[j + 2] * ((j + 2) as f64 * (j + 1) as f64);
            beta[j] = rhs / a;
        }
    } else if b.abs() > 1e-12 {
        for j in (0..k).rev() {
            let rhs = t[j] - beta[j + 2] * ((j + 2) as f64 * (j + 1) as f64);
            beta[j + 1] = rhs / (b * (j + 1) as f64);
        }
    } else {
        for j in (0..k).rev() {
            beta[j + 2] = t[j] / ((j + 2) as f64 * (j + 1) as f64);
        }
    }
    beta
}

/// Particular solution of H^C[u] = f outside B_{r0} (in the ℂ-adapted radius),
/// carrying no added decaying harmonics.
pub fn solve_far_field(cb: &CauchyBorn, f: &dyn ContinuumField, spec: &FarFieldSpec) -> Result<PolarField> {
    let c = scalar_c(cb)?;
    let (ch, cih) = sqrt_pair(&c)?;
    let empty = |res: f64, nodes: usize| {
        let mut pf = PolarField {
            series: PolarSeries::default(),
            center: spec.center,
            r_min: spec.r0,
            fit_residual: res,
            angular_nodes: nodes,
            jet: None,
            t: cih,
        };
        pf.jet = Some(PolarJet::new(&pf.series, FIELD_JET_ORDER));
        pf
    };
    if f.is_zero() {
        return Ok(empty(0.0, 0));
    }
    // −Δ_y v = g(y) with v(y) = u(x̂ + ℂ^{1/2}y)
    let nr = 24usize;
    let radii: Vec<f64> = (0..nr).map(|q| spec.r0 * 64f64.powf(q as f64 / (nr - 1) as f64)).collect();
    let mut planner = FftPlanner::<f64>::new();
    let mut m_nodes = 32usize;
    let coefs: Vec<Vec<Complex64>> = loop {
        let fft = planner.plan_fft_forward(m_nodes);
        let mut table = Vec::with_capacity(nr);
        for &r in &radii {
            let mut line: Vec<Complex64> = (0..m_nodes)
                .map(|t| {
                    let th = 2.0 * PI * t as f64 / m_nodes as f64;
                    let y = [r * th.cos(), r * th.sin()];
                    let x = [
                        spec.center[0] + ch[(0, 0)] * y[0] + ch[(0, 1)] * y[1],
                        spec.center[1] + ch[(1, 0)] * y[0] + ch[(1, 1)] * y[1],
                    ];
                    f.value(&x).map(|v| Complex64::new(v, 0.0))
                })
                .collect::<Result<_>>()?;
            fft.process(&mut line);
            let scale = r.powi(-spec.gamma) / m_nodes as f64;
            table.push(line.iter().map(|v| v * scale).collect::<Vec<_>>());
        }
        let big = table.iter().flat_map(|l| l.iter().map(|v| v.norm())).fold(0.0, f64::max);
        let tail = table
            .iter()
            .flat_map(|l| {
                let m = l.len();
                l.iter().enumerate().filter(move |(i, _)| *i >= m / 4 && *i <= 3 * m / 4).map(|(_, v)| v.norm())
            })
            .fold(0.0, f64::max);
        if big == 0.0 {
            return Ok(empty(0.0, m_nodes));
        }
        if tail <= 1e-12 * big {
            break table;
        }
        if m_nodes >= 4096 {
            return Err(Error::ModeTruncationNotConverged(format!(
                "angular tail {:e} of {m_nodes} nodes",
                tail / big
            )));
        }
        m_nodes *= 2;
    };
    let big = coefs.iter().flat_map(|l| l.iter().map(|v| v.norm())).fold(0.0, f64::max);
    // radial basis r^{γ−e}·log^k r in the scaled form r^{−e}·log^k r
    let mut basis: Vec<(i32, u32)> = Vec::new();
    for e in 0..=spec.extra_powers as i32 {
        for k in 0..=spec.log_pow {
            basis.push((spec.gamma - e, k));
        }
    }
    let nb = basis.len();
    let mut mat = DMatrix::zeros(nr, nb);
    for (q, &r) in radii.iter().enumerate() {
        for (c, &(g, k)) in basis.iter().enumerate() {
            mat[(q, c)] = r.powi(g - spec.gamma) * r.ln().powi(k as i32);
        }
    }
    let norms: Vec<f64> = (0..nb).map(|c| mat.column(c).norm()).collect();
    for c in 0..nb {
        let n = norms[c];
        mat.column_mut(c).scale_mut(1.0 / n);
    }
    let svd = mat.clone().svd(true, true);
    let mut terms = Vec::new();
    let mut res_acc = 0.0;
    let mut res_cnt = 0usize;
    let half = m_nodes as i64 / 2;
    for idx in 0..m_nodes {
        let m = if (idx as i64) < half { idx as i64 } else { idx as i64 - m_nodes as i64 };
        let col: Vec<Complex64> = coefs.iter().map(|l| l[idx]).collect();
        if col.iter().all(|v| v.norm() <= 1e-14 * big) {
            continue;
        }
        let mut fit = vec![Complex64::new(0.0, 0.0); nb];
        for part in 0..2 {
            let rhs = DVector::from_iterator(nr, col.iter().map(|v| if part == 0 { v.re } else { v.im }));
            let sol = svd.solve(&rhs, 1e-13).map_err(|e| Error::ModeTruncationNotConverged(e.to_string()))?;
            let resid = (&mat * &sol - &rhs).norm();
            res_acc += (resid / big).powi(2);
            res_cnt += 1;
            for c in 0..nb {
                let v = sol[c] / norms[c];
                if part == 0 {
                    fit[c].re = v;
                } else {
                    fit[c].im = v;
                }
            }
        }
        // group by power, solve L_m v = −g per power
        for e in 0..=spec.extra_powers as i32 {
            let g = spec.gamma - e;
            let t: Vec<Complex64> = (0..=spec.log_pow)
                .map(|k| {
                    let c = basis.iter().position(|b| *b == (g, k)).expect("basis entry");
                    -fit[c]
                })
                .collect();
            if t.iter().all(|v| v.norm() <= 1e-14 * big) {
                continue;
            }
            let s = (g + 2) as f64;
            for (j, bj) in radial_particular(s, m as i32, &t).into_iter().enumerate() {
                if bj.norm() > 0.0 {
                    terms.push(PolarTerm::new(bj, s, m as i32, j as u32));
                }
            }
        }
    }
    let fit_residual = (res_acc / res_cnt.max(1) as f64).sqrt();
    if fit_residual > 1e-8 {
        return Err(Error::ModeTruncationNotConverged(format!(
            "radial fit residual {fit_residual:e}; widen the log or power basis"
        )));
    }
    let mut pf = PolarField {
        series: PolarSeries::new(terms),
        center: spec.center,
        r_min: spec.r0,
        fit_residual,
        angular_nodes: m_nodes,
        jet: None,
        t: cih,
    };
    pf.jet = Some(PolarJet::new(&pf.series, FIELD_JET_ORDER));
    Ok(pf)
}

/// Which defect the predictor describes.
#[derive(Debug, Clone, Copy, Serialize)]
pub enum DefectKind {
    Point,
    Screw(ScrewSpec),
}

/// u₀^C..u_p^C plus the continuum multipole fields they depend on.
pub struct PredictorStack {
    pub p: usize,
    pub dim: usize,
    pub correctors: Vec<Arc<dyn ContinuumField>>,
    pub multipoles: Vec<Option<Arc<dyn ContinuumField>>>,
    pub provenance: Vec<String>,
    pub kind: DefectKind,
}

impl PredictorStack {
    /// û_p(x) = Σ uᵢ^C(x); correctors outside their validity region contribute 0.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for f in &self.correctors {
            if f.is_zero() {
                continue;
            }
            match f.value(x) {
                Ok(v) => s += v,
                Err(Error::EvaluationDomainExceeded(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(s)
    }

    pub fn difference(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for f in &self.correctors {
            if f.is_zero() {
                continue;
            }
            match f.difference(x, y) {
                Ok(v) => s += v,
                Err(Error::EvaluationDomainExceeded(_)) => {
                    s += self.value_of(f.as_ref(), y)? - self.value_of(f.as_ref(), x)?;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(s)
    }

    fn value_of(&self, f: &dyn ContinuumField, x: &[f64]) -> Result<f64> {
        match f.value(x) {
            Ok(v) => Ok(v),
            Err(Error::EvaluationDomainExceeded(_)) => Ok(0.0),
            Err(e) => Err(e),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.correctors.iter().all(|f| f.is_zero())
    }

    /// Predictor sampled on lattice sites.
    pub fn site_field(&self, lattice: &Lattice, window: Arc<Window>) -> Result<LatticeField> {
        let mut vals = Vec::with_capacity(window.len());
        for s in window.sites() {
            vals.push(self.value(&lattice.position(s)[..self.dim])?);
        }
        Ok(LatticeField { window, ncomp: 1, values: vals })
    }

    /// Stencil differences û(ℓ+ρ) − û(ℓ), respecting the branch cut.
    pub fn bond_differences(&self, lattice: &Lattice, site: &Site) -> Result<Vec<f64>> {
        let x = lattice.position(site);
        lattice
            .stencil()
            .iter()
            .map(|rho| {
                let y = lattice.position(&crate::lattice::add(site, rho));
                self.difference(&x[..self.dim], &y[..self.dim])
            })
            .collect()
    }

    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "p": self.p,
            "kind": self.kind,
            "correctors": self.correctors.iter().map(|f| f.describe()).collect::<Vec<_>>(),
            "multipoles": self.multipoles.iter().map(|f| f.as_ref().map(|g| g.describe())).collect::<Vec<_>>(),
            "provenance": self.provenance,
        })
    }
}

/// Builds û_p: u₀ = 0 for point defects and u₀ = u_CLE for the screw, then
/// correctors in order. `multipoles[i]` supplies u_i^CMP where 𝒮 needs it.
pub fn assemble_predictor(
    model: &dyn SitePotential,
    kind: DefectKind,
    p: usize,
    multipoles: Vec<Option<Arc<dyn ContinuumField>>>,
    r0: f64,
) -> Result<PredictorStack> {
    if p > 2 {
        return Err(Error::Unsupported(format!("predictor order {p}: only S0..S2 are defined")));
    }
    let lat = model.lattice();
    let d = lat.dim();
    let mut stack = PredictorStack {
        p,
        dim: d,
        correctors: Vec::new(),
        multipoles,
        provenance: Vec::new(),
        kind,
    };
    match kind {
        DefectKind::Point => {
            // u_i^C = 0 for i ≤ d; the expansion is the pure multipole one
            for i in 0..=p {
                stack.correctors.push(Arc::new(ZeroField { dim: d }));
                stack.provenance.push(format!("u{i}^C = 0 for point defects (i <= d)"));
            }
            return Ok(stack);
        }
        DefectKind::Screw(spec) => {
            let cle = u_cle_screw(model, &spec)?;
            stack.correctors.push(Arc::new(cle));
            stack.provenance.push("u0^C = u_CLE".into());
            let cb = cauchy_born(model);
            for i in 1..=p {
                let rhs = build_rhs_s(model, i, &stack)?;
                let log_pow = (i - 1) as u32;
                let fs = FarFieldSpec {
                    r0,
                    gamma: -(d as i32) - i as i32,
                    log_pow,
                    extra_powers: 0,
                    center: spec.core,
                };
                let field: Arc<dyn ContinuumField> = if rhs.is_zero() {
                    Arc::new(ZeroField { dim: d })
                } else {
                    Arc::new(solve_far_field(&cb, &rhs, &fs)?)
                };
                stack.provenance.push(format!("u{i}^C solves H^C[u] = {}", rhs.provenance));
                stack.correctors.push(field);
            }
        }
    }
    Ok(stack)
}

/// The three equivalent net-force quantities for a dislocation-type field.
#[derive(Debug, Clone, Serialize)]
pub struct ForceIdentity {
    pub contour: f64,
    pub sum_first_variation: f64,
    pub sum_linearised: f64,
    /// Σ|δℰ(u)(ℓ)| over the summation ball.
    pub absolute_force: f64,
    pub radius: f64,
    /// Largest pairwise gap divided by max(|contour|, absolute_force·1e−3).
    pub relative_gap: f64,
}

/// Field u_CLE + c·G^C(x − x̂), whose net force is c.
struct ShiftedScrew {
    cle: ScrewCle,
    c: f64,
    cih: Matrix2<f64>,
    det: f64,
}

impl ShiftedScrew {
    fn source(&self, x: &[f64]) -> (f64, [f64; 2]) {
        let dx = [x[0] - self.cle.spec.core[0], x[1] - self.cle.spec.core[1]];
        // G^C(x) = −log|ℂ^{−1/2}x| / (2π√det ℂ); ∇G^C = −ℂ⁻¹x / (2π√det ℂ |ℂ^{−1/2}x|²)
        let y = self.cih * nalgebra::Vector2::new(dx[0], dx[1]);
        let pre = -1.0 / (2.0 * PI * self.det.sqrt());
        let cinv = self.cih * self.cih;
        let g = cinv * nalgebra::Vector2::new(dx[0], dx[1]) / y.norm_squared();
        (pre * y.norm().ln() * self.c, [pre * g[0] * self.c, pre * g[1] * self.c])
    }
}

/// −∮_{∂B₁(x̂)} ℂ∇u·ν, Σ_{|ℓ|≤R} δℰ(u)(ℓ) and Σ_{|ℓ|≤R} H[u](ℓ) for
/// u = u_CLE + c·G^C(· − x̂).
pub fn screw_force_identity(model: &dyn SitePotential, spec: &ScrewSpec, c: f64, radius: f64) -> Result<ForceIdentity> {
    let cb = cauchy_born(model);
    let cmat = scalar_c(&cb)?;
    let cle = u_cle_screw(model, spec)?;
    let (_, cih) = sqrt_pair(&cmat)?;
    let det = cmat[0] * cmat[3] - cmat[1] * cmat[2];
    let field = ShiftedScrew { cle, c, cih, det };
    // contour: trapezoid on the unit circle is spectrally accurate
    let nodes = 512;
    let mut contour = 0.0;
    for t in 0..nodes {
        let th = 2.0 * PI * t as f64 / nodes as f64;
        let nu = [th.cos(), th.sin()];
        let x = [spec.core[0] + nu[0], spec.core[1] + nu[1]];
        let g0 = &field.cle.jet(&x, 1)?[1];
        let (_, gs) = field.source(&x);
        let g = [g0[0] + gs[0], g0[1] + gs[1]];
        let flux = (0..2).map(|a| (0..2).map(|b| cmat[a * 2 + b] * g[b] * nu[a]).sum::<f64>()).sum::<f64>();
        contour -= flux * 2.0 * PI / nodes as f64;
    }
    let lat = model.lattice();
    let nb = lat.stencil_len();
    let blocks = hessian_blocks(model);
    let window = Window::ball(lat, radius + 2.0 * lat.reach(), &[0.0; 3]);
    let diffs = |s: &Site| -> Result<Vec<f64>> {
        let x = lat.position(s);
        let (vx, _) = field.source(&x);
        lat.stencil()
            .iter()
            .map(|rho| {
                let y = lat.position(&crate::lattice::add(s, rho));
                let (vy, _) = field.source(&y);
                Ok(field.cle.difference(&x[..2], &y[..2])? + vy - vx)
            })
            .collect()
    };
    // per-site stresses ∂V(Du(ℓ)) and linear stresses ∇²V(0)Du(ℓ)
    let mut stress = std::collections::HashMap::new();
    for s in window.sites() {
        let g = diffs(s)?;
        let mut nl = vec![0.0; nb];
        model.gradient(&g, None, &mut nl);
        let lin: Vec<f64> = (0..nb).map(|r| (0..nb).map(|q| blocks[r][q][0] * g[q]).sum()).collect();
        stress.insert(*s, (nl, lin));
    }
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut abs = 0.0;
    for s in window.sites() {
        if lat.norm(s) > radius {
            continue;
        }
        let (nl0, lin0) = &stress[s];
        let mut f1 = 0.0;
        let mut f2 = 0.0;
        for (b, rho) in lat.stencil().iter().enumerate() {
            let (nl, lin) = &stress[&crate::lattice::sub(s, rho)];
            f1 += nl[b] - nl0[b];
            f2 += lin[b] - lin0[b];
        }
        s1 += f1;
        s2 += f2;
        abs += f1.abs();
    }
    let vals = [contour, s1, s2];
    let mut gap: f64 = 0.0;
    for a in 0..3 {
        for b in 0..a {
            gap = gap.max((vals[a] - vals[b]).abs());
        }
    }
    let scale = contour.abs().max(1e-3 * abs).max(1e-300);
    Ok(ForceIdentity {
        contour,
        sum_first_variation: s1,
        sum_linearised: s2,
        absolute_force: abs,
        radius,
        relative_gap: gap / scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{build_model, Params};

    /// Scalar field given by a polynomial Σ c·x^a y^b.
    struct Poly(Vec<(f64, u32, u32)>);

    impl ContinuumField for Poly {
        fn dim(&self) -> usize {
            2
        }
        fn jet_order(&self) -> usize {
            usize::MAX
        }
        fn jet(&self, x: &[f64], order: usize) -> Result<Vec<Vec<f64>>> {
            let fall = |p: u32, k: u32, v: f64| -> f64 {
                if k > p {
                    return 0.0;
                }
                let c: f64 = (0..k).map(|i| (p - i) as f64).product();
                c * v.powi((p - k) as i32)
            };
            Ok((0..=order)
                .map(|j| {
                    (0..1usize << j)
                        .map(|f| {
                            let ky = (f as u32).count_ones();
                            let kx = j as u32 - ky;
                            self.0.iter().map(|&(c, a, b)| c * fall(a, kx, x[0]) * fall(b, ky, x[1])).sum()
                        })
                        .collect()
                })
                .collect())
        }
    }

    #[test]
    fn strain_gradient_oracle() {
        let m = build_model("antiplane-sine", &Params::new()).unwrap();
        let u = Poly(vec![(1.0, 4, 0)]);
        assert!((apply_h_sg(m.as_ref(), &u, &[0.3, -1.1]).unwrap() + 2.0).abs() < 1e-12);
        let q = Poly(vec![(1.0, 2, 0), (-3.0, 1, 1), (0.5, 0, 2)]);
        assert_eq!(apply_h_sg(m.as_ref(), &q, &[0.7, 0.2]).unwrap(), 0.0);
    }

    #[test]
    fn screw_jump_and_gradient() {
        let m = build_model("antiplane-sine", &Params::new()).unwrap();
        let spec = ScrewSpec::default();
        let u = u_cle_screw(m.as_ref(), &spec).unwrap();
        let above = [spec.core[0] + 2.0, spec.core[1] + 1e-9];
        let below = [spec.core[0] + 2.0, spec.core[1] - 1e-9];
        assert!((u.value(&above).unwrap() - u.value(&below).unwrap() + 1.0).abs() < 1e-8);
        let x = [3.0, -2.0];
        let g = &u.jet(&x, 1).unwrap()[1];
        let r = (x[0] - spec.core[0]).hypot(x[1] - spec.core[1]);
        assert!((g[0].hypot(g[1]) - 1.0 / (2.0 * PI * r)).abs() < 1e-14);
        let h = &u.jet(&x, 2).unwrap()[2];
        assert!((h[0] + h[3]).abs() < 1e-14);
        assert!(check_branch_cut(m.lattice(), &ScrewSpec { burgers: 1.0, core: [0.5, 0.0] }).is_err());
    }

    #[test]
    fn even_model_has_no_first_corrector() {
        let m = build_model("antiplane-sine", &Params::new()).unwrap();
        let stack = assemble_predictor(m.as_ref(), DefectKind::Screw(ScrewSpec::default()), 1, vec![], 4.0).unwrap();
        assert!(stack.correctors[1].is_zero());
        let rhs = build_rhs_s(m.as_ref(), 1, &stack).unwrap();
        assert!(rhs.is_zero());
        assert!(build_rhs_s(m.as_ref(), 0, &stack).unwrap().is_zero());
    }

    #[test]
    fn manufactured_far_field() {
        let m = build_model("antiplane-sine", &Params::new()).unwrap();
        let cb = cauchy_born(m.as_ref());
        // u* = r⁻¹ cos θ log r, f = −Δu* = 2 r⁻³ cos θ
        struct F;
        impl ContinuumField for F {
            fn dim(&self) -> usize {
                2
            }
            fn jet_order(&self) -> usize {
                0
            }
            fn jet(&self, x: &[f64], _o: usize) -> Result<Vec<Vec<f64>>> {
                let r = x[0].hypot(x[1]);
                Ok(vec![vec![2.0 * x[0] / r.powi(4)]])
            }
        }
        let spec = FarFieldSpec { r0: 2.0, gamma: -3, log_pow: 0, extra_powers: 0, center: [0.0, 0.0] };
        let u = solve_far_field(&cb, &F, &spec).unwrap();
        for &r in &[4.0, 9.0, 20.0] {
            for &th in &[0.3, 2.0, 4.4] {
                let x = [r * f64::cos(th), r * f64::sin(th)];
                let exact = th.cos() * r.ln() / r;
                assert!((u.value(&x).unwrap() - exact).abs() < 1e-10);
                assert!((apply_h_c(&cb, &u, &x).unwrap() - 2.0 * x[0] / r.powi(4)).abs() < 1e-12);
            }
        }
        let zero = solve_far_field(&cb, &ZeroField { dim: 2 }, &spec).unwrap();
        assert!(zero.is_zero());
    }

    #[test]
    fn net_force_identity() {
        let m = build_model("antiplane-sine", &Params::new()).unwrap();
        let spec = ScrewSpec::default();
        let id = screw_force_identity(m.as_ref(), &spec, 0.0, 24.0).unwrap();
        assert!(id.contour.abs() < 1e-10);
        let id = screw_force_identity(m.as_ref(), &spec, 0.2, 24.0).unwrap();
        assert!((id.contour - 0.2).abs() < 1e-10);
        assert!(id.relative_gap < 1e-2, "{id:?}");
    }
}
