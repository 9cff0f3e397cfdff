//! Real fields on the plane written as finite sums Re Σ c·r^s·(log r)^j·e^{imθ},
//! with exact Cartesian derivatives.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarTerm {
    pub re: f64,
    pub im: f64,
    pub power: f64,
    pub mode: i32,
    pub log_pow: u32,
}

impl PolarTerm {
    pub fn new(c: Complex64, power: f64, mode: i32, log_pow: u32) -> Self {
        PolarTerm { re: c.re, im: c.im, power, mode, log_pow }
    }
    pub fn coef(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolarSeries {
    pub terms: Vec<PolarTerm>,
}

impl PolarSeries {
    pub fn new(terms: Vec<PolarTerm>) -> Self {
        let mut s = PolarSeries { terms };
        s.compact();
        s
    }

    /// Merge like terms and drop exact zeros.
    pub fn compact(&mut self) {
        let mut out: Vec<PolarTerm> = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            match out.iter_mut().find(|o| o.power == t.power && o.mode == t.mode && o.log_pow == t.log_pow) {
                Some(o) => {
                    o.re += t.re;
                    o.im += t.im;
                }
                None => out.push(*t),
            }
        }
        out.retain(|t| t.re != 0.0 || t.im != 0.0);
        self.terms = out;
    }

    pub fn eval_complex(&self, x: f64, y: f64) -> Complex64 {
        let r = x.hypot(y);
        let th = y.atan2(x);
        let lr = r.ln();
        let mut acc = Complex64::new(0.0, 0.0);
        for t in &self.terms {
            let mag = r.powf(t.power) * lr.powi(t.log_pow as i32);
            acc += t.coef() * mag * Complex64::from_polar(1.0, t.mode as f64 * th);
        }
        acc
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.eval_complex(x, y).re
    }

    /// ∂/∂z and ∂/∂z̄ of the complex series.
    fn wirtinger(&self) -> (PolarSeries, PolarSeries) {
        let mut dz = Vec::new();
        let mut dzb = Vec::new();
        for t in &self.terms {
            let c = t.coef();
            let (s, m, j) = (t.power, t.mode, t.log_pow);
            let a = 0.5 * (s + m as f64);
            let b = 0.5 * (s - m as f64);
            if a != 0.0 {
                dz.push(PolarTerm::new(c * a, s - 1.0, m - 1, j));
            }
            if b != 0.0 {
                dzb.push(PolarTerm::new(c * b, s - 1.0, m + 1, j));
            }
            if j > 0 {
                let w = 0.5 * j as f64;
                dz.push(PolarTerm::new(c * w, s - 1.0, m - 1, j - 1));
                dzb.push(PolarTerm::new(c * w, s - 1.0, m + 1, j - 1));
            }
        }
        (PolarSeries::new(dz), PolarSeries::new(dzb))
    }

    /// Cartesian partial derivative along axis 0 (x) or 1 (y).
    pub fn derivative(&self, axis: usize) -> PolarSeries {
        let (dz, dzb) = self.wirtinger();
        let mut terms = Vec::with_capacity(dz.terms.len() + dzb.terms.len());
        let i = Complex64::new(0.0, 1.0);
        if axis == 0 {
            terms.extend(dz.terms);
            terms.extend(dzb.terms);
        } else {
            for t in dz.terms {
                terms.push(PolarTerm::new(t.coef() * i, t.power, t.mode, t.log_pow));
            }
            for t in dzb.terms {
                terms.push(PolarTerm::new(-t.coef() * i, t.power, t.mode, t.log_pow));
            }
        }
        PolarSeries::new(terms)
    }

    pub fn scaled(&self, a: Complex64) -> PolarSeries {
        PolarSeries {
            terms: self.terms.iter().map(|t| PolarTerm::new(t.coef() * a, t.power, t.mode, t.log_pow)).collect(),
        }
    }

    pub fn add(&mut self, other: &PolarSeries) {
        self.terms.extend_from_slice(&other.terms);
        self.compact();
    }
}

/// All derivatives of a polar series through a fixed order, indexed by sorted
/// multi-index (count of y-derivatives per order).
#[derive(Debug, Clone)]
pub struct PolarJet {
    /// `levels[j][q]` = ∂_x^{j−q} ∂_y^{q} of the series.
    levels: Vec<Vec<PolarSeries>>,
}

impl PolarJet {
    pub fn new(base: &PolarSeries, order: usize) -> Self {
        let mut levels = vec![vec![base.clone()]];
        for j in 1..=order {
            let prev = &levels[j - 1];
            let mut cur = Vec::with_capacity(j + 1);
            for q in 0..=j {
                if q < j {
                    cur.push(prev[q].derivative(0));
                } else {
                    cur.push(prev[q - 1].derivative(1));
                }
            }
            levels.push(cur);
        }
        PolarJet { levels }
    }

    pub fn order(&self) -> usize {
        self.levels.len() - 1
    }

    /// Full derivative tensor of order j at (x, y), row-major over 2^j entries.
    pub fn tensor(&self, j: usize, x: f64, y: f64) -> Vec<f64> {
        let vals: Vec<f64> = self.levels[j].iter().map(|s| s.eval(x, y)).collect();
        (0..1usize << j)
            .map(|f| {
                let q = (f as u32).count_ones() as usize;
                vals[q]
            })
            .collect()
    }

    pub fn series(&self, j: usize, q: usize) -> &PolarSeries {
        &self.levels[j][q]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_derivative() {
        // Re log r: gradient x/r²
        let s = PolarSeries::new(vec![PolarTerm::new(Complex64::new(1.0, 0.0), 0.0, 0, 1)]);
        let (x, y) = (1.3, -0.4);
        let r2 = x * x + y * y;
        assert!((s.derivative(0).eval(x, y) - x / r2).abs() < 1e-14);
        assert!((s.derivative(1).eval(x, y) - y / r2).abs() < 1e-14);
    }

    #[test]
    fn matches_finite_differences() {
        let s = PolarSeries::new(vec![
            PolarTerm::new(Complex64::new(0.7, -0.2), -2.0, 4, 0),
            PolarTerm::new(Complex64::new(0.7, 0.2), -2.0, -4, 0),
            PolarTerm::new(Complex64::new(-0.3, 0.0), -1.0, 1, 1),
            PolarTerm::new(Complex64::new(0.1, 0.5), -3.0, 3, 2),
        ]);
        let jet = PolarJet::new(&s, 2);
        let (x, y) = (0.9, 1.7);
        let h = 1e-5;
        let fx = (s.eval(x + h, y) - s.eval(x - h, y)) / (2.0 * h);
        let fy = (s.eval(x, y + h) - s.eval(x, y - h)) / (2.0 * h);
        let g = jet.tensor(1, x, y);
        assert!((g[0] - fx).abs() < 1e-8 && (g[1] - fy).abs() < 1e-8);
        let fxy = (s.eval(x + h, y + h) - s.eval(x + h, y - h) - s.eval(x - h, y + h) + s.eval(x - h, y - h))
            / (4.0 * h * h);
        let hss = jet.tensor(2, x, y);
        assert!((hss[1] - fxy).abs() < 1e-5 && hss[1] == hss[2]);
    }
}
