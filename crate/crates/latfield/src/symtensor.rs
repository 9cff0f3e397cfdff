//! Symmetric tensors stored by sorted multi-index.

use serde::Serialize;

use crate::error::{Error, Result};

/// All non-decreasing index tuples of length `order` over `0..dim`, lexicographic.
pub fn multisets(dim: usize, order: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(order);
    fn rec(dim: usize, order: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == order {
            out.push(cur.clone());
            return;
        }
        for i in start..dim {
            cur.push(i);
            rec(dim, order, i, cur, out);
            cur.pop();
        }
    }
    rec(dim, order, 0, &mut cur, &mut out);
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Number of distinct orderings of a multi-index.
pub fn multiplicity(idx: &[usize]) -> f64 {
    let mut sorted = idx.to_vec();
    sorted.sort_unstable();
    let mut denom = 1.0;
    let mut run = 1;
    for w in 1..=sorted.len() {
        if w < sorted.len() && sorted[w] == sorted[w - 1] {
            run += 1;
        } else {
            denom *= factorial(run);
            run = 1;
        }
    }
    factorial(sorted.len()) / denom
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymTensor {
    order: usize,
    dim: usize,
    keys: Vec<Vec<usize>>,
    lookup: Vec<usize>,
    pub data: Vec<f64>,
}

impl SymTensor {
    pub fn zeros(dim: usize, order: usize) -> Self {
        let keys = multisets(dim, order);
        let full = dim.pow(order as u32);
        let mut lookup = vec![0; full];
        for (f, slot) in lookup.iter_mut().enumerate() {
            let mut idx = unflatten(f, dim, order);
            idx.sort_unstable();
            *slot = keys.binary_search(&idx).expect("multiset");
        }
        let n = keys.len();
        SymTensor { order, dim, keys, lookup, data: vec![0.0; n] }
    }

    pub fn order(&self) -> usize {
        self.order
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    /// Canonical (sorted) multi-indices, aligned with `data`.
    pub fn keys(&self) -> &[Vec<usize>] {
        &self.keys
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Canonical slot of an arbitrary (unsorted) index tuple.
    pub fn slot(&self, idx: &[usize]) -> usize {
        self.lookup[flatten(idx, self.dim)]
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.slot(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let s = self.slot(idx);
        self.data[s] = v;
    }

    /// Symmetrization of a full tensor in row-major layout.
    pub fn from_full(full: &[f64], dim: usize, order: usize) -> Self {
        let mut t = SymTensor::zeros(dim, order);
        let mut count = vec![0.0; t.len()];
        for (f, v) in full.iter().enumerate() {
            let s = t.lookup[f];
            t.data[s] += v;
            count[s] += 1.0;
        }
        for (x, c) in t.data.iter_mut().zip(count) {
            *x /= c;
        }
        t
    }

    pub fn to_full(&self) -> Vec<f64> {
        self.lookup.iter().map(|&s| self.data[s]).collect()
    }

    /// Full contraction with another symmetric tensor of the same shape.
    pub fn dot(&self, other: &SymTensor) -> f64 {
        self.keys
            .iter()
            .zip(self.data.iter().zip(&other.data))
            .map(|(k, (a, b))| multiplicity(k) * a * b)
            .sum()
    }

    /// Contraction with a full tensor of matching order.
    pub fn contract_full(&self, full: &[f64]) -> f64 {
        self.lookup.iter().zip(full).map(|(&s, v)| self.data[s] * v).sum()
    }

    pub fn scale(&mut self, a: f64) {
        for x in &mut self.data {
            *x *= a;
        }
    }

    pub fn add_assign(&mut self, other: &SymTensor, a: f64) {
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }
}

pub fn flatten(idx: &[usize], dim: usize) -> usize {
    idx.iter().fold(0, |acc, &i| acc * dim + i)
}

pub fn unflatten(mut f: usize, dim: usize, order: usize) -> Vec<usize> {
    let mut idx = vec![0; order];
    for t in (0..order).rev() {
        idx[t] = f % dim;
        f /= dim;
    }
    idx
}

/// Symmetric product v1 ⊙ … ⊙ vk = (1/k!) Σ_π v_{π1} ⊗ … ⊗ v_{πk}.
pub fn sym_tensor_product(vectors: &[Vec<f64>]) -> Result<SymTensor> {
    let k = vectors.len();
    let dim = vectors.first().map(|v| v.len()).unwrap_or(0);
    for v in vectors {
        if v.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
        }
    }
    let mut t = SymTensor::zeros(dim, k);
    // component at sorted index μ = (1/k!) Σ_π Π_t v_{π(t)}[μ_t]  (a permanent)
    for s in 0..t.len() {
        let key = t.keys[s].clone();
        t.data[s] = permanent(vectors, &key) / factorial(k);
    }
    Ok(t)
}

fn permanent(vectors: &[Vec<f64>], key: &[usize]) -> f64 {
    let k = vectors.len();
    if k == 0 {
        return 1.0;
    }
    // Ryser-free recursion; k is tiny.
    let mut used = vec![false; k];
    fn rec(t: usize, vectors: &[Vec<f64>], key: &[usize], used: &mut [bool]) -> f64 {
        if t == key.len() {
            return 1.0;
        }
        let mut s = 0.0;
        for i in 0..vectors.len() {
            if !used[i] {
                used[i] = true;
                s += vectors[i][key[t]] * rec(t + 1, vectors, key, used);
                used[i] = false;
            }
        }
        s
    }
    rec(0, vectors, key, &mut used)
}

/// Full tensor power x^{⊗k} in row-major layout.
pub fn tensor_power(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![1.0];
    for _ in 0..k {
        let mut next = Vec::with_capacity(out.len() * x.len());
        for a in &out {
            for b in x {
                next.push(a * b);
            }
        }
        out = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_products() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let t = sym_tensor_product(std::slice::from_ref(&e1)).unwrap();
        assert_eq!(t.data, vec![1.0, 0.0]);
        let t = sym_tensor_product(&[e1.clone(), e2.clone()]).unwrap();
        assert_eq!(t.to_full(), vec![0.0, 0.5, 0.5, 0.0]);
        let v = vec![0.3, -1.2, 2.0];
        let t = sym_tensor_product(&[v.clone(), v.clone(), v.clone()]).unwrap();
        let full = tensor_power(&v, 3);
        for (a, b) in t.to_full().iter().zip(&full) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(sym_tensor_product(&[e1, vec![1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn multiset_counts() {
        assert_eq!(multisets(2, 3).len(), 4);
        assert_eq!(multisets(3, 2).len(), 6);
        assert_eq!(multiplicity(&[0, 0, 1]), 3.0);
        assert_eq!(multiplicity(&[0, 1, 2]), 6.0);
    }

    #[test]
    fn dot_matches_full_contraction() {
        let a = sym_tensor_product(&[vec![1.0, 2.0], vec![-0.5, 0.25], vec![3.0, 1.0]]).unwrap();
        let b = sym_tensor_product(&[vec![0.1, 0.7], vec![0.4, -2.0], vec![1.0, 1.0]]).unwrap();
        let full: f64 = a.to_full().iter().zip(b.to_full()).map(|(x, y)| x * y).sum();
        assert!((a.dot(&b) - full).abs() < 1e-13);
        assert!((a.contract_full(&b.to_full()) - full).abs() < 1e-13);
    }
}
