//! Fourier multiplier of the linearised operator, its Taylor terms and the
//! homogeneous series of its inverse.

use crate::error::{Error, Result};
use crate::lattice::{Lattice, Site};
use crate::potentials::{hessian_blocks, SitePotential};

/// Coefficient matrix for a ± pair of difference vectors.
#[derive(Debug, Clone)]
pub struct DiffTerm {
    pub v: Site,
    pub phys: [f64; 3],
    /// A_v + A_{−v}, symmetric, N×N row-major.
    pub coef: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MultiplierSeries {
    d: usize,
    n: usize,
    terms: Vec<DiffTerm>,
    pub n_max: i32,
}

fn canonical(v: &Site) -> (Site, bool) {
    for &x in v {
        if x > 0 {
            return (*v, true);
        }
        if x < 0 {
            return ([-v[0], -v[1], -v[2]], false);
        }
    }
    (*v, true)
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

impl MultiplierSeries {
    pub fn new(v: &dyn SitePotential) -> Self {
        let lat = v.lattice();
        let n = lat.ncomp();
        let blocks = hessian_blocks(v);
        let mut terms: Vec<DiffTerm> = Vec::new();
        let mut acc = |vec: Site, m: &[f64], w: f64, lat: &Lattice| {
            if vec == [0, 0, 0] {
                return;
            }
            let (c, _) = canonical(&vec);
            let pos = match terms.iter().position(|t| t.v == c) {
                Some(p) => p,
                None => {
                    terms.push(DiffTerm { v: c, phys: lat.position(&c), coef: vec![0.0; n * n] });
                    terms.len() - 1
                }
            };
            for (x, y) in terms[pos].coef.iter_mut().zip(m) {
                *x += w * y;
            }
        };
        let st = lat.stencil();
        for (r, rho) in st.iter().enumerate() {
            for (s, sig) in st.iter().enumerate() {
                let c = &blocks[r][s];
                acc(*rho, c, 0.5, lat);
                acc(*sig, c, 0.5, lat);
                acc(crate::lattice::sub(rho, sig), c, -0.5, lat);
            }
        }
        for t in terms.iter_mut() {
            for i in 0..n {
                for j in 0..i {
                    let a = 0.5 * (t.coef[i * n + j] + t.coef[j * n + i]);
                    t.coef[i * n + j] = a;
                    t.coef[j * n + i] = a;
                }
            }
        }
        terms.retain(|t| t.coef.iter().any(|x| x.abs() > 1e-300));
        terms.sort_by_key(|a| a.v);
        MultiplierSeries { d: lat.dim(), n, terms, n_max: 3 }
    }

    pub fn dim(&self) -> usize {
        self.d
    }
    pub fn ncomp(&self) -> usize {
        self.n
    }
    pub fn terms(&self) -> &[DiffTerm] {
        &self.terms
    }

    /// Ĥ at reduced wave vector q (phase q·n for integer n), written into `out`.
    pub fn multiplier_reduced(&self, q: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for t in &self.terms {
            let ph: f64 = (0..self.d).map(|a| q[a] * t.v[a] as f64).sum();
            let s = 4.0 * (0.5 * ph).sin().powi(2);
            for (o, c) in out.iter_mut().zip(&t.coef) {
                *o += s * c;
            }
        }
    }

    /// Ĥ(k) for a physical wave vector.
    pub fn multiplier(&self, k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for t in &self.terms {
            let ph: f64 = (0..self.d).map(|a| k[a] * t.phys[a]).sum();
            let s = 4.0 * (0.5 * ph).sin().powi(2);
            for (o, c) in out.iter_mut().zip(&t.coef) {
                *o += s * c;
            }
        }
        out
    }

    /// The 2n-homogeneous Taylor term Ĥ₂ₙ(k).
    pub fn multiplier_term(&self, n: i32, k: &[f64]) -> Result<Vec<f64>> {
        if n < 1 {
            return Err(Error::InvalidOrder(n as i64));
        }
        let mut out = vec![0.0; self.n * self.n];
        let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
        let w = sign * 2.0 / factorial(2 * n as u32);
        for t in &self.terms {
            let ph: f64 = (0..self.d).map(|a| k[a] * t.phys[a]).sum();
            let s = w * ph.powi(2 * n);
            for (o, c) in out.iter_mut().zip(&t.coef) {
                *o += s * c;
            }
        }
        Ok(out)
    }

    /// 𝒜₂ₙ(k), n ≥ −1.
    pub fn inverse_series_term(&self, n: i32, k: &[f64]) -> Result<Vec<f64>> {
        if n < -1 {
            return Err(Error::InvalidOrder(n as i64));
        }
        let nn = self.n;
        let h2 = self.multiplier_term(1, k)?;
        let h2inv = inverse(&h2, nn).ok_or_else(|| Error::SingularH2(k.to_vec()))?;
        if n == -1 {
            return Ok(h2inv);
        }
        let mut hcache: Vec<Option<Vec<f64>>> = vec![None; (n + 3) as usize];
        let mut out = vec![0.0; nn * nn];
        for comp in compositions(n) {
            let mut acc = h2inv.clone();
            for &a in &comp {
                let m = (a / 2) as usize;
                if hcache[m].is_none() {
                    hcache[m] = Some(self.multiplier_term(m as i32, k)?);
                }
                acc = matmul(&acc, hcache[m].as_ref().unwrap(), nn);
                acc = matmul(&acc, &h2inv, nn);
            }
            let sign = if comp.len() % 2 == 0 { 1.0 } else { -1.0 };
            for (o, x) in out.iter_mut().zip(&acc) {
                *o += sign * x;
            }
        }
        Ok(out)
    }

    /// Σ_{n=−1}^{p} 𝒜₂ₙ(k).
    pub fn inverse_series_sum(&self, p: i32, k: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n * self.n];
        for m in -1..=p {
            for (o, x) in out.iter_mut().zip(self.inverse_series_term(m, k)?) {
                *o += x;
            }
        }
        Ok(out)
    }
}

/// Compositions α (ordered, parts even and ≥ 4) with Σα − 2j − 2 = 2n, j = 1..n+1.
pub fn compositions(n: i32) -> Vec<Vec<i32>> {
    let mut out = Vec::new();
    for j in 1..=(n + 1) {
        let total = 2 * n + 2 * j + 2;
        let mut cur = Vec::new();
        fn rec(left: i32, parts: i32, cur: &mut Vec<i32>, out: &mut Vec<Vec<i32>>) {
            if parts == 0 {
                if left == 0 {
                    out.push(cur.clone());
                }
                return;
            }
            let mut a = 4;
            while a <= left - 4 * (parts - 1) {
                cur.push(a);
                rec(left - a, parts - 1, cur, out);
                cur.pop();
                a += 2;
            }
        }
        rec(total, j, &mut cur, &mut out);
    }
    out
}

pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Closed-form inverse for N ≤ 3, LU otherwise. `None` when singular.
pub fn inverse(m: &[f64], n: usize) -> Option<Vec<f64>> {
    let scale = m.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    let tiny = 1e-14 * scale.powi(n as i32);
    match n {
        1 => (m[0].abs() > tiny).then(|| vec![1.0 / m[0]]),
        2 => {
            let det = m[0] * m[3] - m[1] * m[2];
            (det.abs() > tiny).then(|| vec![m[3] / det, -m[1] / det, -m[2] / det, m[0] / det])
        }
        3 => {
            let c = |i: usize, j: usize| m[i * 3 + j];
            let mut out = [0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    let (a, b) = ((j + 1) % 3, (j + 2) % 3);
                    let (p, q) = ((i + 1) % 3, (i + 2) % 3);
                    out[i * 3 + j] = c(a, p) * c(b, q) - c(a, q) * c(b, p);
                }
            }
            let det = c(0, 0) * out[0] + c(0, 1) * out[3] + c(0, 2) * out[6];
            if det.abs() <= tiny {
                return None;
            }
            Some(out.iter().map(|x| x / det).collect())
        }
        _ => {
            let mat = nalgebra::DMatrix::from_row_slice(n, n, m);
            let inv = mat.lu().try_inverse()?;
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = inv[(i, j)];
                }
            }
            Some(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{build_model, Params};

    #[test]
    fn antiplane_multiplier() {
        let m = build_model("antiplane-sine", &Params::new()).unwrap();
        let ms = MultiplierSeries::new(m.as_ref());
        assert!((ms.multiplier(&[std::f64::consts::PI, 0.0])[0] - 4.0).abs() < 1e-14);
        assert_eq!(ms.multiplier(&[0.0, 0.0])[0], 0.0);
        let k = [0.3, -0.7];
        assert!((ms.multiplier_term(1, &k).unwrap()[0] - 0.58).abs() < 1e-14);
        let h4 = -(0.3f64.powi(4) + 0.7f64.powi(4)) / 12.0;
        assert!((ms.multiplier_term(2, &k).unwrap()[0] - h4).abs() < 1e-15);
        let a0 = (0.3f64.powi(4) + 0.7f64.powi(4)) / (12.0 * 0.58 * 0.58);
        assert!((ms.inverse_series_term(0, &k).unwrap()[0] - a0).abs() < 1e-14);
        assert!(ms.multiplier_term(0, &k).is_err());
    }

    #[test]
    fn composition_counts() {
        assert_eq!(compositions(0), vec![vec![4]]);
        assert_eq!(compositions(1), vec![vec![6], vec![4, 4]]);
        assert_eq!(compositions(2), vec![vec![8], vec![4, 6], vec![6, 4], vec![4, 4, 4]]);
    }

    #[test]
    fn inverse_closed_forms() {
        let m3 = vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let inv = inverse(&m3, 3).unwrap();
        let id = matmul(&m3, &inv, 3);
        for i in 0..3 {
            for j in 0..3 {
                assert!((id[i * 3 + j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
        assert!(inverse(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
    }
}
