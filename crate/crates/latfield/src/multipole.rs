//! Force moments, the moment to coefficient map and multipole fields built
//! from differences of the lattice Green's function.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::analysis::{shell_fit, ShellFit};
use crate::error::{Error, Result};
use crate::greens::LatticeGreens;
use crate::kernels::{direction_tuples, KernelSet};
use crate::lattice::{add, Lattice, LatticeField, Site};
use crate::symtensor::{flatten, multiplicity, multisets, sym_tensor_product, tensor_power, SymTensor};

/// ℐⱼ = Σ f(ℓ) ⊗ ℓ^{⊗j}, stored as `data[k * d^j + flat]`.
#[derive(Debug, Clone, Serialize)]
pub struct MomentTensor {
    pub order: usize,
    pub ncomp: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub radius: f64,
    /// Estimated size of the neglected sum beyond `radius`.
    pub tail: f64,
    /// Sum with the geometric tail model added.
    pub extrapolated: Vec<f64>,
}

impl MomentTensor {
    pub fn component(&self, k: usize) -> &[f64] {
        let w = self.dim.pow(self.order as u32);
        &self.data[k * w..(k + 1) * w]
    }

    /// Largest deviation from symmetry in the lattice slots.
    pub fn symmetry_defect(&self) -> f64 {
        let w = self.dim.pow(self.order as u32);
        let mut worst: f64 = 0.0;
        for k in 0..self.ncomp {
            let full = &self.data[k * w..(k + 1) * w];
            let sym = SymTensor::from_full(full, self.dim, self.order).to_full();
            for (a, b) in full.iter().zip(&sym) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }
}

/// Moments ℐ₀..ℐ_{j_max} of `f` over |x| ≤ radius, with a tail estimate from the
/// partial sums at radius/4 and radius/2.
pub fn compute_moments(f: &LatticeField, lattice: &Lattice, j_max: usize, radius: f64) -> Result<Vec<MomentTensor>> {
    let d = lattice.dim();
    let n = f.ncomp;
    let cuts = [radius / 4.0, radius / 2.0, radius];
    let mut out = Vec::with_capacity(j_max + 1);
    for j in 0..=j_max {
        let w = d.pow(j as u32);
        let mut partial = vec![vec![0.0; n * w]; 3];
        let mut magnitude = 0.0;
        for (idx, s) in f.window.sites().iter().enumerate() {
            let x = lattice.position(s);
            let r = lattice.norm(s);
            if r > radius {
                continue;
            }
            let pw = tensor_power(&x[..d], j);
            let val = &f.values[idx * n..(idx + 1) * n];
            magnitude += val.iter().map(|v| v.abs()).sum::<f64>() * r.powi(j as i32);
            for (c, cut) in cuts.iter().enumerate() {
                if r <= *cut {
                    for k in 0..n {
                        for (t, p) in pw.iter().enumerate() {
                            partial[c][k * w + t] += val[k] * p;
                        }
                    }
                }
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let d1: Vec<f64> = partial[1].iter().zip(&partial[0]).map(|(a, b)| a - b).collect();
        let d2: Vec<f64> = partial[2].iter().zip(&partial[1]).map(|(a, b)| a - b).collect();
        // increments at the rounding level of the sum count as converged
        let floor = 1e-13 * norm(&partial[2]).max(1.0) + 1e-12 * magnitude;
        let (n1, n2) = (norm(&d1), norm(&d2));
        let (tail, extrapolated) = if n2 <= floor {
            (n2, partial[2].clone())
        } else {
            let q = n2 / n1;
            if !q.is_finite() || q >= 1.0 {
                return Err(Error::NonSummableTail(format!(
                    "moment {j}: shell increments {n1:e} then {n2:e} do not decrease"
                )));
            }
            let factor = q / (1.0 - q);
            (n2 * factor, partial[2].iter().zip(&d2).map(|(s, dd)| s + factor * dd).collect())
        };
        out.push(MomentTensor {
            order: j,
            ncomp: n,
            dim: d,
            data: partial[2].clone(),
            radius,
            tail,
            extrapolated,
        });
    }
    Ok(out)
}

/// Coefficients b^{(i,k)} over the difference basis 𝒮.
#[derive(Debug, Clone, Serialize)]
pub struct MultipoleCoeffs {
    pub basis: Vec<Site>,
    pub basis_phys: Vec<Vec<f64>>,
    /// `coeffs[i][k]`, symmetric tensors of order i over |𝒮| slots.
    pub coeffs: Vec<Vec<SymTensor>>,
    /// Condition number of the order-i moment map.
    pub condition: Vec<f64>,
}

impl MultipoleCoeffs {
    pub fn zeros(lattice: &Lattice, basis: &[Site], p: usize) -> Self {
        let d = lattice.dim();
        let n = lattice.ncomp();
        MultipoleCoeffs {
            basis: basis.to_vec(),
            basis_phys: basis.iter().map(|b| lattice.position(b)[..d].to_vec()).collect(),
            coeffs: (0..p).map(|i| (0..n).map(|_| SymTensor::zeros(basis.len(), i)).collect()).collect(),
            condition: vec![1.0; p],
        }
    }

    /// Number of orders (p).
    pub fn orders(&self) -> usize {
        self.coeffs.len()
    }

    /// Coefficient vector over all (i, k, key), in a fixed order.
    pub fn flat(&self) -> Vec<f64> {
        self.coeffs.iter().flat_map(|o| o.iter().flat_map(|t| t.data.iter().copied())).collect()
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let mut it = v.iter();
        for o in self.coeffs.iter_mut() {
            for t in o.iter_mut() {
                for x in t.data.iter_mut() {
                    *x = *it.next().expect("flat coefficient length");
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.coeffs.iter().map(|o| o.iter().map(|t| t.len()).sum::<usize>()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// v_b = Σ_shift 𝒢(ℓ + shift)·w_shift, as a map shift → w ∈ ℝᴺ.
    pub fn shifts(&self) -> BTreeMap<Site, Vec<f64>> {
        let n = self.coeffs.first().map(|o| o.len()).unwrap_or(0);
        let mut out: BTreeMap<Site, Vec<f64>> = BTreeMap::new();
        for (i, order) in self.coeffs.iter().enumerate() {
            for (k, t) in order.iter().enumerate() {
                for (slot, key) in t.keys().iter().enumerate() {
                    let c = t.data[slot] * multiplicity(key);
                    if c == 0.0 {
                        continue;
                    }
                    for mask in 0u32..(1 << i) {
                        let mut s = [0i64; 3];
                        for (q, &b) in key.iter().enumerate() {
                            if mask & (1 << q) != 0 {
                                s = add(&s, &self.basis[b]);
                            }
                        }
                        let sign = if (i - mask.count_ones() as usize).is_multiple_of(2) { 1.0 } else { -1.0 };
                        out.entry(s).or_insert_with(|| vec![0.0; n])[k] += sign * c;
                    }
                }
            }
        }
        out
    }
}

/// D_{−ρ}(x^{⊗j})(0) = Σ_{S⊆ρ} (−1)^{i−|S|} (−Σ_S ρ)^{⊗j}, full layout.
fn difference_moment(rhos: &[Vec<f64>], j: usize, d: usize) -> Vec<f64> {
    let i = rhos.len();
    let mut out = vec![0.0; d.pow(j as u32)];
    for mask in 0u32..(1 << i) {
        let mut y = vec![0.0; d];
        for (t, r) in rhos.iter().enumerate() {
            if mask & (1 << t) != 0 {
                for a in 0..d {
                    y[a] -= r[a];
                }
            }
        }
        let sign = if (i - mask.count_ones() as usize).is_multiple_of(2) { 1.0 } else { -1.0 };
        for (o, v) in out.iter_mut().zip(tensor_power(&y, j)) {
            *o += sign * v;
        }
    }
    out
}

fn check_basis(lattice: &Lattice, basis: &[Site]) -> Result<()> {
    let d = lattice.dim();
    if basis.len() != d {
        return Err(Error::BasisDegenerate);
    }
    let m = DMatrix::from_fn(d, d, |r, c| basis[c][r] as f64);
    if (m.determinant().abs() - 1.0).abs() > 1e-9 {
        return Err(Error::BasisDegenerate);
    }
    Ok(())
}

/// Default difference basis: the lattice generators.
pub fn default_basis(lattice: &Lattice) -> Vec<Site> {
    (0..lattice.dim()).map(|c| lattice.generator(c)).collect()
}

/// Unique b with ℐⱼ(v_b) equal to the targets for j = 0..moments.len()−1.
///
/// Lower-order coefficients also feed higher moments (D_{−ρ} of a degree-j
/// monomial need not vanish when |ρ| < j), so orders are solved in sequence.
pub fn fit_coefficients(moments: &[MomentTensor], lattice: &Lattice, basis: &[Site]) -> Result<MultipoleCoeffs> {
    check_basis(lattice, basis)?;
    let d = lattice.dim();
    let n = lattice.ncomp();
    let p = moments.len();
    let mut b = MultipoleCoeffs::zeros(lattice, basis, p);
    for j in 0..p {
        let mt = &moments[j];
        if mt.order != j || mt.ncomp != n || mt.dim != d {
            return Err(Error::DimensionMismatch { expected: j, got: mt.order });
        }
        let bkeys = multisets(d, j);
        let okeys = multisets(d, j);
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        let fact: f64 = (1..=j).map(|k| k as f64).product();
        let mut mat = DMatrix::zeros(okeys.len(), bkeys.len());
        for (c, key) in bkeys.iter().enumerate() {
            let vecs: Vec<Vec<f64>> = key.iter().map(|&q| b.basis_phys[q].clone()).collect();
            let prod = sym_tensor_product(&vecs)?;
            for (r, ok) in okeys.iter().enumerate() {
                mat[(r, c)] = sign * fact * multiplicity(key) * prod.get(ok);
            }
        }
        let sv = mat.clone().svd(false, false).singular_values;
        let smax = sv.max();
        let smin = sv.min();
        if smin <= 1e-12 * smax {
            return Err(Error::BasisDegenerate);
        }
        b.condition[j] = smax / smin;
        let lu = mat.lu();
        for k in 0..n {
            let mut target: Vec<f64> = okeys.iter().map(|ok| mt.component(k)[flatten(ok, d)]).collect();
            for i in 0..j {
                let t = &b.coeffs[i][k];
                for (slot, key) in t.keys().iter().enumerate() {
                    let c = t.data[slot] * multiplicity(key);
                    if c == 0.0 {
                        continue;
                    }
                    let vecs: Vec<Vec<f64>> = key.iter().map(|&q| b.basis_phys[q].clone()).collect();
                    let dm = difference_moment(&vecs, j, d);
                    for (r, ok) in okeys.iter().enumerate() {
                        target[r] -= c * dm[flatten(ok, d)];
                    }
                }
            }
            let rhs = nalgebra::DVector::from_vec(target);
            let sol = lu.solve(&rhs).ok_or(Error::BasisDegenerate)?;
            b.coeffs[j][k].data.copy_from_slice(sol.as_slice());
        }
    }
    Ok(b)
}

/// Moments ℐ₀..ℐ_{p−1} of v_b computed in closed form from its compact forcing.
pub fn multipole_moments(b: &MultipoleCoeffs, lattice: &Lattice) -> Result<Vec<MomentTensor>> {
    let f = multipole_forcing(b, lattice);
    let r = f.window.sites().iter().map(|s| lattice.norm(s)).fold(1.0, f64::max);
    compute_moments(&f, lattice, b.orders().saturating_sub(1), 4.0 * r)
}

/// H[v_b] = Σ_shift w_shift δ_{−shift}: a compactly supported field.
pub fn multipole_forcing(b: &MultipoleCoeffs, lattice: &Lattice) -> LatticeField {
    let n = lattice.ncomp();
    let shifts = b.shifts();
    let sites: Vec<Site> = shifts.keys().map(crate::lattice::neg).collect();
    let window = std::sync::Arc::new(crate::lattice::Window::from_sites(lattice.dim(), sites));
    let mut f = LatticeField::zeros(window, n);
    for (s, w) in &shifts {
        let v = f.get_mut(&crate::lattice::neg(s)).expect("forcing site");
        for (a, b) in v.iter_mut().zip(w) {
            *a += b;
        }
    }
    f
}

/// Σ_shift 𝒢(ℓ + shift) w_shift with a caller-supplied Green's function lookup.
pub fn eval_discrete_multipole_with(
    shifts: &BTreeMap<Site, Vec<f64>>,
    n: usize,
    site: &Site,
    mut lookup: impl FnMut(&Site) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    for (s, w) in shifts {
        let g = lookup(&add(site, s))?;
        for i in 0..n {
            for k in 0..n {
                out[i] += g[i * n + k] * w[k];
            }
        }
    }
    Ok(out)
}

/// Σ b^{(i,k)} : D_𝒮ⁱ𝒢_k(ℓ) using window values only.
pub fn eval_discrete_multipole(b: &MultipoleCoeffs, g: &LatticeGreens, site: &Site) -> Result<Vec<f64>> {
    let n = g.lattice().ncomp();
    eval_discrete_multipole_with(&b.shifts(), n, site, |s| g.value(s).map(|v| v.to_vec()))
}

/// Continuum counterpart Σ a^{(i,n,k)} : ∇ⁱGₙ e_k.
#[derive(Debug, Clone, Serialize)]
pub struct ContinuumMultipole {
    pub p: usize,
    pub dim: usize,
    pub ncomp: usize,
    /// `a[i][k]`: full tensor of order i, shared by every kernel order n with 2n + i ≤ p − 1.
    pub a: Vec<Vec<Vec<f64>>>,
}

/// Compositions of m into `parts` positive integers.
fn positive_compositions(m: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 0 {
        return if m == 0 { vec![Vec::new()] } else { Vec::new() };
    }
    let mut out = Vec::new();
    for first in 1..=m.saturating_sub(parts - 1) {
        for mut rest in positive_compositions(m - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

impl ContinuumMultipole {
    /// Taylor-expands each D_ρ into derivatives and keeps total order 2n + i ≤ p − 1.
    pub fn from_coeffs(b: &MultipoleCoeffs, lattice: &Lattice, p: usize) -> Self {
        let d = lattice.dim();
        let n = lattice.ncomp();
        let mut a = Vec::with_capacity(p);
        for m in 0..p {
            let w = d.pow(m as u32);
            let mut per_k = vec![vec![0.0; w]; n];
            for (i, order) in b.coeffs.iter().enumerate().take(m + 1) {
                for (k, t) in order.iter().enumerate() {
                    for (slot, key) in t.keys().iter().enumerate() {
                        let c = t.data[slot] * multiplicity(key);
                        if c == 0.0 {
                            continue;
                        }
                        for comp in positive_compositions(m, i) {
                            let fact: f64 =
                                comp.iter().map(|&q| (1..=q).map(|v| v as f64).product::<f64>()).product();
                            let mut acc = vec![1.0];
                            for (&q, &bi) in comp.iter().zip(key) {
                                let pw = tensor_power(&b.basis_phys[bi], q);
                                acc = acc.iter().flat_map(|x| pw.iter().map(move |y| x * y)).collect();
                            }
                            for (o, v) in per_k[k].iter_mut().zip(&acc) {
                                *o += c * v / fact;
                            }
                        }
                    }
                }
            }
            a.push(per_k);
        }
        ContinuumMultipole { p, dim: d, ncomp: n, a }
    }

    /// Highest kernel order needed.
    pub fn kernel_order(&self) -> usize {
        self.p.saturating_sub(1) / 2
    }

    pub fn eval(&self, kernels: &KernelSet, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.ncomp;
        let mut out = vec![0.0; n];
        for kn in 0..=self.kernel_order() {
            let kernel = kernels.get(kn)?;
            for (m, per_k) in self.a.iter().enumerate() {
                if 2 * kn + m + 1 > self.p {
                    continue;
                }
                if per_k.iter().all(|t| t.iter().all(|v| *v == 0.0)) {
                    continue;
                }
                let w = self.dim.pow(m as u32);
                let grad = kernel.eval(x, m)?;
                for i in 0..n {
                    for (k, t) in per_k.iter().enumerate() {
                        let base = (i * n + k) * w;
                        out[i] += t.iter().zip(&grad[base..base + w]).map(|(a, g)| a * g).sum::<f64>();
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Σ a^{(i,n,k)} : ∇ⁱ(Gₙ)_{·k}(x) for the coefficients b truncated at order p.
pub fn eval_continuum_multipole(b: &MultipoleCoeffs, lattice: &Lattice, kernels: &KernelSet, x: &[f64], p: usize) -> Result<Vec<f64>> {
    ContinuumMultipole::from_coeffs(b, lattice, p).eval(kernels, x)
}

/// Shell-max slope of |Dʲ(discrete − continuum)| over the window of G.
pub fn multipole_gap_report(
    b: &MultipoleCoeffs,
    g: &LatticeGreens,
    p: usize,
    j: usize,
    r_min: f64,
    r_max: f64,
) -> Result<ShellFit> {
    let lat = g.lattice();
    let n = lat.ncomp();
    let d = lat.dim();
    let cm = ContinuumMultipole::from_coeffs(b, lat, p);
    let shifts = b.shifts();
    let kernels = g.kernels();
    let mut cache: BTreeMap<Site, Vec<f64>> = BTreeMap::new();
    let mut gap = |s: &Site| -> Result<Vec<f64>> {
        if let Some(v) = cache.get(s) {
            return Ok(v.clone());
        }
        let disc = eval_discrete_multipole_with(&shifts, n, s, |q| g.value(q).map(|v| v.to_vec()))?;
        let x = lat.position(s);
        let cont = cm.eval(kernels, &x[..d])?;
        let v: Vec<f64> = disc.iter().zip(&cont).map(|(a, c)| a - c).collect();
        cache.insert(*s, v.clone());
        Ok(v)
    };
    let tuples = direction_tuples(lat, j);
    let mut samples = Vec::new();
    'sites: for s in g.window().sites() {
        let r = lat.norm(s);
        if r < r_min || r > r_max {
            continue;
        }
        let mut worst: f64 = 0.0;
        for tup in &tuples {
            let mut acc = vec![0.0; n];
            for mask in 0u32..(1 << j) {
                let mut q = *s;
                for (t, dd) in tup.iter().enumerate() {
                    if mask & (1 << t) != 0 {
                        q = add(&q, dd);
                    }
                }
                let sign = if (j - mask.count_ones() as usize).is_multiple_of(2) { 1.0 } else { -1.0 };
                let v = match gap(&q) {
                    Ok(v) => v,
                    Err(Error::OutOfWindow(_)) => continue 'sites,
                    Err(e) => return Err(e),
                };
                for i in 0..n {
                    acc[i] += sign * v[i];
                }
            }
            worst = worst.max(acc.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        samples.push((r, worst));
    }
    shell_fit(&samples, r_min, r_max, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::lattice::Window;

    fn point_field(lat: &Lattice, sites: &[(Site, Vec<f64>)]) -> LatticeField {
        let w = Arc::new(Window::from_sites(lat.dim(), sites.iter().map(|s| s.0).collect()));
        let mut f = LatticeField::zeros(w, lat.ncomp());
        for (s, v) in sites {
            f.get_mut(s).unwrap().copy_from_slice(v);
        }
        f
    }

    #[test]
    fn point_mass_moments() {
        let lat = Lattice::triangular_nn(2);
        let f = point_field(&lat, &[([0, 0, 0], vec![1.0, 0.0])]);
        let m = compute_moments(&f, &lat, 1, 4.0).unwrap();
        assert_eq!(m[0].data, vec![1.0, 0.0]);
        assert!(m[1].data.iter().all(|v| *v == 0.0));
        assert_eq!(m[0].tail, 0.0);
    }

    #[test]
    fn dipole_moment_of_difference() {
        let lat = Lattice::square_nn(1);
        // D_ρ δ₀ with ρ = e₁: +1 at −ρ, −1 at 0
        let f = point_field(&lat, &[([-1, 0, 0], vec![1.0]), ([0, 0, 0], vec![-1.0])]);
        let m = compute_moments(&f, &lat, 1, 4.0).unwrap();
        assert_eq!(m[0].data, vec![0.0]);
        assert_eq!(m[1].data, vec![-1.0, 0.0]);
        let b = fit_coefficients(&m, &lat, &default_basis(&lat)).unwrap();
        assert!((b.coeffs[1][0].get(&[0]) - 1.0).abs() < 1e-15);
        assert!(b.coeffs[1][0].get(&[1]).abs() < 1e-15);
        assert!(b.coeffs[0][0].get(&[]).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate_basis() {
        let lat = Lattice::square_nn(1);
        let f = point_field(&lat, &[([0, 0, 0], vec![1.0])]);
        let m = compute_moments(&f, &lat, 0, 2.0).unwrap();
        assert!(matches!(fit_coefficients(&m, &lat, &[[1, 0, 0], [2, 0, 0]]), Err(Error::BasisDegenerate)));
        assert!(matches!(fit_coefficients(&m, &lat, &[[2, 0, 0], [0, 1, 0]]), Err(Error::BasisDegenerate)));
    }

    #[test]
    fn non_summable_tail_detected() {
        let lat = Lattice::square_nn(1);
        let w = Arc::new(Window::ball(&lat, 40.0, &[0.0; 3]));
        let f = LatticeField::from_fn(w, 1, |s| vec![1.0 / (1.0 + lat.norm(s))]);
        assert!(matches!(compute_moments(&f, &lat, 0, 40.0), Err(Error::NonSummableTail(_))));
    }

    #[test]
    fn taylor_leading_terms() {
        let lat = Lattice::triangular_nn(2);
        let basis = default_basis(&lat);
        let mut b = MultipoleCoeffs::zeros(&lat, &basis, 2);
        b.coeffs[1][0].set(&[0], 0.7);
        b.coeffs[1][0].set(&[1], -0.2);
        let cm = ContinuumMultipole::from_coeffs(&b, &lat, 2);
        let expect: Vec<f64> =
            (0..2).map(|a| 0.7 * b.basis_phys[0][a] - 0.2 * b.basis_phys[1][a]).collect();
        for a in 0..2 {
            assert!((cm.a[1][0][a] - expect[a]).abs() < 1e-15);
        }
        assert!(cm.a[0][0].iter().all(|v| *v == 0.0));
    }
}
