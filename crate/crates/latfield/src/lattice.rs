//! Bravais lattices, windows of sites and finite differences.

use std::collections::HashSet;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Integer lattice coordinates. Unused trailing entries are zero.
pub type Site = [i64; 3];

pub fn site2(a: i64, b: i64) -> Site {
    [a, b, 0]
}

pub fn add(a: &Site, b: &Site) -> Site {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: &Site, b: &Site) -> Site {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn neg(a: &Site) -> Site {
    [-a[0], -a[1], -a[2]]
}

#[derive(Debug, Clone)]
pub struct Lattice {
    dim: usize,
    ncomp: usize,
    basis: [[f64; 3]; 3],
    basis_inv: [[f64; 3]; 3],
    stencil: Vec<Site>,
    stencil_phys: Vec<[f64; 3]>,
    neg: Vec<usize>,
    c_vol: f64,
}

fn det(m: &[[f64; 3]; 3], d: usize) -> f64 {
    match d {
        1 => m[0][0],
        2 => m[0][0] * m[1][1] - m[0][1] * m[1][0],
        _ => {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        }
    }
}

fn inverse(m: &[[f64; 3]; 3], d: usize) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    let dt = det(m, d);
    match d {
        1 => out[0][0] = 1.0 / dt,
        2 => {
            out[0][0] = m[1][1] / dt;
            out[0][1] = -m[0][1] / dt;
            out[1][0] = -m[1][0] / dt;
            out[1][1] = m[0][0] / dt;
        }
        _ => {
            for i in 0..3 {
                for j in 0..3 {
                    let (a, b) = ((j + 1) % 3, (j + 2) % 3);
                    let (c, e) = ((i + 1) % 3, (i + 2) % 3);
                    out[i][j] = (m[a][c] * m[b][e] - m[a][e] * m[b][c]) / dt;
                }
            }
        }
    }
    out
}

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn int_det(cols: &[&Site], d: usize) -> i64 {
    match d {
        1 => cols[0][0],
        2 => cols[0][0] * cols[1][1] - cols[1][0] * cols[0][1],
        _ => {
            let m = |r: usize, c: usize| cols[c][r];
            m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
                - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
        }
    }
}

/// The integer span of `vecs` is all of Z^d iff the gcd of the maximal minors is 1.
fn spans_lattice(vecs: &[Site], d: usize) -> bool {
    let n = vecs.len();
    if n < d {
        return false;
    }
    let mut g = 0i64;
    let mut idx: Vec<usize> = (0..d).collect();
    loop {
        let cols: Vec<&Site> = idx.iter().map(|&i| &vecs[i]).collect();
        g = gcd(g, int_det(&cols, d));
        if g == 1 {
            return true;
        }
        let mut i = d;
        while i > 0 && idx[i - 1] == n - d + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return false;
        }
        idx[i - 1] += 1;
        for j in i..d {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

impl Lattice {
    /// `basis[r][c]`: column c is the c-th generator. Stencil given in integer coordinates.
    pub fn new(basis: &[Vec<f64>], stencil: &[Site], ncomp: usize) -> Result<Self> {
        let d = basis.len();
        if !(1..=3).contains(&d) || basis.iter().any(|r| r.len() != d) {
            return Err(Error::SingularBasis);
        }
        let mut b = [[0.0; 3]; 3];
        for r in 0..d {
            for c in 0..d {
                b[r][c] = basis[r][c];
            }
        }
        let dt = det(&b, d);
        let scale: f64 = basis.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max);
        if !dt.is_finite() || dt.abs() <= 1e-12 * scale.powi(d as i32) {
            return Err(Error::SingularBasis);
        }
        if stencil.is_empty() {
            return Err(Error::StencilDoesNotSpan);
        }
        let mut stencil = stencil.to_vec();
        for s in stencil.iter_mut() {
            for x in s.iter_mut().skip(d) {
                *x = 0;
            }
        }
        let set: HashSet<Site> = stencil.iter().copied().collect();
        if set.contains(&[0, 0, 0]) {
            return Err(Error::StencilDoesNotSpan);
        }
        let mut negi = Vec::with_capacity(stencil.len());
        for s in &stencil {
            let m = neg(s);
            match stencil.iter().position(|t| *t == m) {
                Some(i) => negi.push(i),
                None => return Err(Error::StencilNotSymmetric(s[..d].to_vec())),
            }
        }
        if !spans_lattice(&stencil, d) {
            return Err(Error::StencilDoesNotSpan);
        }
        let mut lat = Lattice {
            dim: d,
            ncomp,
            basis: b,
            basis_inv: inverse(&b, d),
            stencil_phys: Vec::new(),
            stencil,
            neg: negi,
            c_vol: dt.abs(),
        };
        lat.stencil_phys = lat.stencil.iter().map(|s| lat.position(s)).collect();
        Ok(lat)
    }

    /// Stencil given as physical vectors; each must be an exact lattice vector.
    pub fn from_physical_stencil(basis: &[Vec<f64>], stencil: &[Vec<f64>], ncomp: usize) -> Result<Self> {
        let d = basis.len();
        let mut b = [[0.0; 3]; 3];
        for r in 0..d {
            if basis[r].len() != d {
                return Err(Error::SingularBasis);
            }
            for c in 0..d {
                b[r][c] = basis[r][c];
            }
        }
        if det(&b, d).abs() < 1e-14 {
            return Err(Error::SingularBasis);
        }
        let inv = inverse(&b, d);
        let mut ints = Vec::new();
        for v in stencil {
            if v.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: v.len() });
            }
            let mut s = [0i64; 3];
            for r in 0..d {
                let x: f64 = (0..d).map(|c| inv[r][c] * v[c]).sum();
                let n = x.round();
                if (x - n).abs() > 1e-9 {
                    return Err(Error::NotLatticeVector(v.clone()));
                }
                s[r] = n as i64;
            }
            ints.push(s);
        }
        Self::new(basis, &ints, ncomp)
    }

    pub fn square_nn(ncomp: usize) -> Self {
        let basis = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let st = [site2(1, 0), site2(0, 1), site2(-1, 0), site2(0, -1)];
        Self::new(&basis, &st, ncomp).expect("square lattice")
    }

    pub fn triangular_nn(ncomp: usize) -> Self {
        let basis = vec![vec![1.0, 0.5], vec![0.0, 3f64.sqrt() / 2.0]];
        let st = [
            site2(1, 0),
            site2(0, 1),
            site2(-1, 1),
            site2(-1, 0),
            site2(0, -1),
            site2(1, -1),
        ];
        Self::new(&basis, &st, ncomp).expect("triangular lattice")
    }

    pub fn cubic_nn(ncomp: usize) -> Self {
        let basis = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let st = [[1, 0, 0], [0, 1, 0], [0, 0, 1], [-1, 0, 0], [0, -1, 0], [0, 0, -1]];
        Self::new(&basis, &st, ncomp).expect("cubic lattice")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn ncomp(&self) -> usize {
        self.ncomp
    }
    pub fn c_vol(&self) -> f64 {
        self.c_vol
    }
    pub fn stencil(&self) -> &[Site] {
        &self.stencil
    }
    pub fn stencil_len(&self) -> usize {
        self.stencil.len()
    }
    /// Physical stencil vectors A·ρ.
    pub fn stencil_phys(&self) -> &[[f64; 3]] {
        &self.stencil_phys
    }
    /// Index of −ρ for stencil index `i`.
    pub fn neg_index(&self, i: usize) -> usize {
        self.neg[i]
    }
    pub fn basis(&self) -> &[[f64; 3]; 3] {
        &self.basis
    }
    pub fn basis_inv(&self) -> &[[f64; 3]; 3] {
        &self.basis_inv
    }
    /// Basis generator `c` as an integer site.
    pub fn generator(&self, c: usize) -> Site {
        let mut s = [0; 3];
        s[c] = 1;
        s
    }

    pub fn position(&self, n: &Site) -> [f64; 3] {
        let mut x = [0.0; 3];
        for r in 0..self.dim {
            x[r] = (0..self.dim).map(|c| self.basis[r][c] * n[c] as f64).sum();
        }
        x
    }

    pub fn norm(&self, n: &Site) -> f64 {
        let x = self.position(n);
        (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
    }

    /// Largest |Aρ| over the stencil.
    pub fn reach(&self) -> f64 {
        self.stencil_phys
            .iter()
            .map(|x| (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt())
            .fold(0.0, f64::max)
    }

    /// Half-widths of an integer box containing the physical ball of radius r.
    pub fn box_halfwidth(&self, r: f64) -> [i64; 3] {
        let mut h = [0i64; 3];
        for (i, hi) in h.iter_mut().enumerate().take(self.dim) {
            let row: f64 = (0..self.dim).map(|c| self.basis_inv[i][c].powi(2)).sum::<f64>().sqrt();
            *hi = (r * row).ceil() as i64 + 1;
        }
        h
    }

    /// Inverse image of a physical point, not rounded.
    pub fn reduced(&self, x: &[f64]) -> [f64; 3] {
        let mut n = [0.0; 3];
        for r in 0..self.dim {
            n[r] = (0..self.dim).map(|c| self.basis_inv[r][c] * x[c]).sum();
        }
        n
    }
}

/// A finite set of sites with O(1) lookup through a bounding box.
#[derive(Debug, Clone)]
pub struct Window {
    dim: usize,
    lo: Site,
    shape: [usize; 3],
    slot: Vec<u32>,
    sites: Vec<Site>,
}

const EMPTY: u32 = u32::MAX;

impl Window {
    pub fn from_sites(dim: usize, sites: Vec<Site>) -> Self {
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        if let Some(first) = sites.first() {
            lo = *first;
            hi = *first;
        }
        for s in &sites {
            for i in 0..dim {
                lo[i] = lo[i].min(s[i]);
                hi[i] = hi[i].max(s[i]);
            }
        }
        let mut shape = [1usize; 3];
        for i in 0..dim {
            shape[i] = (hi[i] - lo[i] + 1) as usize;
        }
        let mut w = Window { dim, lo, shape, slot: vec![EMPTY; shape[0] * shape[1] * shape[2]], sites: Vec::new() };
        let mut uniq = Vec::with_capacity(sites.len());
        for s in sites {
            let b = w.box_index(&s).unwrap();
            if w.slot[b] == EMPTY {
                w.slot[b] = uniq.len() as u32;
                uniq.push(s);
            }
        }
        w.sites = uniq;
        w
    }

    /// Sites with |A n − center| ≤ radius, ordered lexicographically.
    pub fn ball(lattice: &Lattice, radius: f64, center: &[f64]) -> Self {
        let d = lattice.dim();
        let c0 = lattice.reduced(center);
        let h = lattice.box_halfwidth(radius);
        let mut sites = Vec::new();
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for i in 0..d {
            lo[i] = c0[i].floor() as i64 - h[i];
            hi[i] = c0[i].ceil() as i64 + h[i];
        }
        let r2 = radius * radius * (1.0 + 1e-12);
        for a in lo[0]..=hi[0] {
            for b in lo[1]..=hi[1] {
                for c in lo[2]..=hi[2] {
                    let s = [a, b, c];
                    let x = lattice.position(&s);
                    let dd: f64 = (0..d).map(|i| (x[i] - center[i]).powi(2)).sum();
                    if dd <= r2 {
                        sites.push(s);
                    }
                }
            }
        }
        Window::from_sites(d, sites)
    }

    /// All sites with lo ≤ n ≤ hi componentwise.
    pub fn boxed(dim: usize, lo: Site, hi: Site) -> Self {
        let mut sites = Vec::new();
        let top = |i: usize| if i < dim { hi[i] } else { 0 };
        let bot = |i: usize| if i < dim { lo[i] } else { 0 };
        for a in bot(0)..=top(0) {
            for b in bot(1)..=top(1) {
                for c in bot(2)..=top(2) {
                    sites.push([a, b, c]);
                }
            }
        }
        Window::from_sites(dim, sites)
    }

    fn box_index(&self, s: &Site) -> Option<usize> {
        let mut idx = 0usize;
        for i in 0..3 {
            let off = s[i] - self.lo[i];
            if off < 0 || off as usize >= self.shape[i] {
                return None;
            }
            idx = idx * self.shape[i] + off as usize;
        }
        Some(idx)
    }

    pub fn index(&self, s: &Site) -> Option<usize> {
        let b = self.box_index(s)?;
        let v = self.slot[b];
        (v != EMPTY).then_some(v as usize)
    }

    pub fn require(&self, s: &Site) -> Result<usize> {
        self.index(s).ok_or_else(|| Error::OutOfWindow(s[..self.dim].to_vec()))
    }

    pub fn contains(&self, s: &Site) -> bool {
        self.index(s).is_some()
    }
    pub fn sites(&self) -> &[Site] {
        &self.sites
    }
    pub fn len(&self) -> usize {
        self.sites.len()
    }
    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Displacement-like field: one N-vector per window site.
#[derive(Debug, Clone)]
pub struct LatticeField {
    pub window: Arc<Window>,
    pub ncomp: usize,
    pub values: Vec<f64>,
}

impl LatticeField {
    pub fn zeros(window: Arc<Window>, ncomp: usize) -> Self {
        let n = window.len() * ncomp;
        LatticeField { window, ncomp, values: vec![0.0; n] }
    }

    pub fn from_fn(window: Arc<Window>, ncomp: usize, mut f: impl FnMut(&Site) -> Vec<f64>) -> Self {
        let mut values = Vec::with_capacity(window.len() * ncomp);
        for s in window.sites() {
            let v = f(s);
            assert_eq!(v.len(), ncomp);
            values.extend_from_slice(&v);
        }
        LatticeField { window, ncomp, values }
    }

    pub fn get(&self, s: &Site) -> Result<&[f64]> {
        let i = self.window.require(s)?;
        Ok(&self.values[i * self.ncomp..(i + 1) * self.ncomp])
    }

    pub fn get_mut(&mut self, s: &Site) -> Result<&mut [f64]> {
        let i = self.window.require(s)?;
        Ok(&mut self.values[i * self.ncomp..(i + 1) * self.ncomp])
    }
}

/// One N-vector per stencil direction per site, layout `[bond][comp]`.
#[derive(Debug, Clone)]
pub struct BondField {
    pub window: Arc<Window>,
    pub ncomp: usize,
    pub nbonds: usize,
    pub values: Vec<f64>,
}

impl BondField {
    pub fn zeros(window: Arc<Window>, ncomp: usize, nbonds: usize) -> Self {
        let n = window.len() * ncomp * nbonds;
        BondField { window, ncomp, nbonds, values: vec![0.0; n] }
    }

    pub fn get(&self, s: &Site) -> Result<&[f64]> {
        let w = self.ncomp * self.nbonds;
        let i = self.window.require(s)?;
        Ok(&self.values[i * w..(i + 1) * w])
    }

    pub fn get_mut(&mut self, s: &Site) -> Result<&mut [f64]> {
        let w = self.ncomp * self.nbonds;
        let i = self.window.require(s)?;
        Ok(&mut self.values[i * w..(i + 1) * w])
    }
}

/// Iterated difference D_{ρ1}…D_{ρj} u(ℓ), expanded over subsets of the directions.
pub fn finite_difference(u: &LatticeField, dirs: &[Site], site: &Site) -> Result<Vec<f64>> {
    let j = dirs.len();
    let mut out = vec![0.0; u.ncomp];
    for mask in 0u32..(1 << j) {
        let mut s = *site;
        for (t, d) in dirs.iter().enumerate() {
            if mask & (1 << t) != 0 {
                s = add(&s, d);
            }
        }
        let sign = if (j - mask.count_ones() as usize).is_multiple_of(2) { 1.0 } else { -1.0 };
        let v = u.get(&s)?;
        for (o, x) in out.iter_mut().zip(v) {
            *o += sign * x;
        }
    }
    Ok(out)
}

/// Discrete divergence −Σ_ρ D_{−ρ} g_ρ(ℓ) = −Σ_ρ (g_ρ(ℓ−ρ) − g_ρ(ℓ)).
pub fn discrete_divergence(g: &BondField, lattice: &Lattice, site: &Site) -> Result<Vec<f64>> {
    let n = g.ncomp;
    let here = g.get(site)?;
    let mut out = vec![0.0; n];
    for (b, rho) in lattice.stencil().iter().enumerate() {
        let there = g.get(&sub(site, rho))?;
        for i in 0..n {
            out[i] -= there[b * n + i] - here[b * n + i];
        }
    }
    Ok(out)
}

/// Bond differences D_ρ u(ℓ) for every stencil direction.
pub fn stencil_differences(u: &LatticeField, lattice: &Lattice, site: &Site) -> Result<Vec<f64>> {
    let n = u.ncomp;
    let here = u.get(site)?.to_vec();
    let mut out = Vec::with_capacity(n * lattice.stencil_len());
    for rho in lattice.stencil() {
        let there = u.get(&add(site, rho))?;
        for i in 0..n {
            out.push(there[i] - here[i]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volumes() {
        assert_eq!(Lattice::square_nn(1).c_vol(), 1.0);
        let t = Lattice::triangular_nn(2);
        assert!((t.c_vol() - 3f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_stencils() {
        let id = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = Lattice::new(&id, &[site2(1, 0), site2(-1, 0)], 1);
        assert!(matches!(r, Err(Error::StencilDoesNotSpan)));
        let r = Lattice::new(&id, &[site2(1, 0), site2(0, 1), site2(-1, 0)], 1);
        assert!(matches!(r, Err(Error::StencilNotSymmetric(_))));
        // spans a sublattice of index 2 only
        let r = Lattice::new(&id, &[site2(1, 1), site2(1, -1), site2(-1, -1), site2(-1, 1)], 1);
        assert!(matches!(r, Err(Error::StencilDoesNotSpan)));
        let sing = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        assert!(matches!(Lattice::new(&sing, &[site2(1, 0)], 1), Err(Error::SingularBasis)));
    }

    #[test]
    fn physical_stencil_must_be_lattice_vectors() {
        let tri = vec![vec![1.0, 0.5], vec![0.0, 3f64.sqrt() / 2.0]];
        let h = 3f64.sqrt() / 2.0;
        let st: Vec<Vec<f64>> = vec![
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.5, h],
            vec![-0.5, -h],
            vec![-0.5, h],
            vec![0.5, -h],
        ];
        let l = Lattice::from_physical_stencil(&tri, &st, 2).unwrap();
        assert_eq!(l.stencil_len(), 6);
        let bad = vec![vec![0.3, 0.0], vec![-0.3, 0.0]];
        assert!(Lattice::from_physical_stencil(&tri, &bad, 2).is_err());
    }

    #[test]
    fn window_lookup_and_errors() {
        let l = Lattice::square_nn(1);
        let w = Window::ball(&l, 2.0, &[0.0, 0.0]);
        assert_eq!(w.len(), 13);
        assert!(w.contains(&site2(2, 0)));
        assert!(!w.contains(&site2(2, 1)));
        let f = LatticeField::zeros(Arc::new(w), 1);
        assert!(matches!(f.get(&site2(3, 0)), Err(Error::OutOfWindow(_))));
    }

    #[test]
    fn differences_of_simple_fields() {
        let l = Lattice::square_nn(1);
        let w = Arc::new(Window::boxed(2, site2(-3, -3), site2(3, 3)));
        let c = LatticeField::from_fn(w.clone(), 1, |_| vec![2.5]);
        assert_eq!(finite_difference(&c, &[site2(1, 0)], &site2(0, 0)).unwrap(), vec![0.0]);
        let lin = LatticeField::from_fn(w.clone(), 1, |s| vec![s[0] as f64]);
        assert_eq!(finite_difference(&lin, &[site2(1, 0)], &site2(0, 0)).unwrap(), vec![1.0]);
        // ℓ⊗ℓ differenced along e1, e2 gives e1⊗e2 + e2⊗e1
        let quad = LatticeField::from_fn(w.clone(), 4, |s| {
            let (a, b) = (s[0] as f64, s[1] as f64);
            vec![a * a, a * b, b * a, b * b]
        });
        let d = finite_difference(&quad, &[site2(1, 0), site2(0, 1)], &site2(1, -1)).unwrap();
        assert_eq!(d, vec![0.0, 1.0, 1.0, 0.0]);
        let g = BondField { window: w.clone(), ncomp: 1, nbonds: 4, values: vec![0.7; w.len() * 4] };
        assert_eq!(discrete_divergence(&g, &l, &site2(0, 0)).unwrap(), vec![0.0]);
    }
}
