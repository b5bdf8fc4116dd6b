//! Multi-indices and symmetric tensors.
//!
//! A symmetric tensor of order `m` over `R^d` is stored with one coefficient
//! per multi-index `α` with `|α| = m`. Multiplicities only enter through the
//! weight `m!/α!` in [`contract`].
//!
//! Multi-indices of a fixed order are enumerated colexicographically: the
//! last coordinate is the most significant. For `d = 2, m = 2` the order is
//! `(2,0), (1,1), (0,2)`. Serialized tensors use this order.

use crate::error::{Error, Result};

/// Largest order for which [`multinomial`] is computed in `u64`.
pub const MAX_FACTORIAL_ORDER: usize = 20;

/// Version tag of the enumeration order, recorded in cache headers.
pub const ENUMERATION_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(Vec<usize>);

impl MultiIndex {
    pub fn new(entries: Vec<usize>) -> Self {
        MultiIndex(entries)
    }

    pub fn zero(d: usize) -> Self {
        MultiIndex(vec![0; d])
    }

    /// The unit multi-index `e_i`.
    pub fn unit(d: usize, i: usize) -> Self {
        let mut e = vec![0; d];
        e[i] = 1;
        MultiIndex(e)
    }

    pub fn entries(&self) -> &[usize] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn order(&self) -> usize {
        self.0.iter().sum()
    }

    /// `α!` as a float.
    pub fn factorial(&self) -> f64 {
        self.0.iter().map(|&a| factorial_f64(a)).product()
    }

    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// `self - other`, or `None` if some entry would go negative.
    pub fn checked_sub(&self, other: &MultiIndex) -> Option<MultiIndex> {
        let mut out = Vec::with_capacity(self.0.len());
        for (a, b) in self.0.iter().zip(&other.0) {
            out.push(a.checked_sub(*b)?);
        }
        Some(MultiIndex(out))
    }

    /// `x^α`.
    pub fn monomial(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x)
            .map(|(&a, &xi)| xi.powi(a as i32))
            .product()
    }

    /// Binomial `Π C(α_i, β_i)`, zero unless `β ≤ α`.
    pub fn binomial(&self, beta: &MultiIndex) -> f64 {
        self.0
            .iter()
            .zip(&beta.0)
            .map(|(&a, &b)| if b > a { 0.0 } else { binomial_f64(a, b) })
            .product()
    }
}

impl std::fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, ")")
    }
}

pub(crate) fn factorial_f64(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

pub(crate) fn binomial_f64(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r.round()
}

/// Number of multi-indices of order `m` in dimension `d`.
pub fn count(d: usize, m: usize) -> usize {
    if d == 0 {
        return usize::from(m == 0);
    }
    binomial_f64(m + d - 1, d - 1) as usize
}

/// All multi-indices of order `m` in dimension `d`, colexicographic.
pub fn multi_indices(d: usize, m: usize) -> Vec<MultiIndex> {
    let mut out = Vec::with_capacity(count(d, m));
    let mut cur = vec![0usize; d];
    fill(d, m, &mut cur, &mut out);
    out
}

fn fill(k: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<MultiIndex>) {
    if k == 0 {
        if m == 0 {
            out.push(MultiIndex(cur.clone()));
        }
        return;
    }
    if k == 1 {
        cur[0] = m;
        out.push(MultiIndex(cur.clone()));
        return;
    }
    for last in 0..=m {
        cur[k - 1] = last;
        fill(k - 1, m - last, cur, out);
    }
    cur[k - 1] = 0;
}

/// Position of `α` in the colexicographic enumeration of its order.
pub fn rank(alpha: &[usize]) -> usize {
    let mut m: usize = alpha.iter().sum();
    let mut r = 0;
    for k in (1..alpha.len()).rev() {
        let a = alpha[k];
        for l in 0..a {
            r += count(k, m - l);
        }
        m -= a;
    }
    r
}

/// `m!/α!` in exact integer arithmetic.
pub fn multinomial(m: usize, alpha: &MultiIndex) -> Result<u64> {
    if alpha.order() != m {
        return Err(Error::OrderMismatch {
            expected: m,
            found: alpha.order(),
        });
    }
    if m > MAX_FACTORIAL_ORDER {
        return Err(Error::Overflow(format!("{m}!/{alpha}!")));
    }
    // Product of binomials C(s_k, α_k) with running partial sums s_k.
    let mut acc: u128 = 1;
    let mut s: u128 = 0;
    for &a in alpha.entries() {
        for j in 1..=a as u128 {
            s += 1;
            acc = acc * s / j;
        }
    }
    u64::try_from(acc).map_err(|_| Error::Overflow(format!("{m}!/{alpha}!")))
}

/// `m!/α!` as a float.
pub(crate) fn multinomial_f64(alpha: &[usize]) -> f64 {
    let mut acc = 1.0;
    let mut s = 0usize;
    for &a in alpha {
        for j in 1..=a {
            s += 1;
            acc = acc * s as f64 / j as f64;
        }
    }
    acc.round()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymTensor {
    dim: usize,
    order: usize,
    coeffs: Vec<f64>,
}

impl SymTensor {
    pub fn zeros(dim: usize, order: usize) -> Self {
        SymTensor {
            dim,
            order,
            coeffs: vec![0.0; count(dim, order)],
        }
    }

    pub fn scalar(dim: usize, value: f64) -> Self {
        SymTensor {
            dim,
            order: 0,
            coeffs: vec![value],
        }
    }

    pub fn from_fn(dim: usize, order: usize, mut f: impl FnMut(&MultiIndex) -> f64) -> Self {
        let coeffs = multi_indices(dim, order).iter().map(&mut f).collect();
        SymTensor { dim, order, coeffs }
    }

    /// Builds a tensor from coefficients in enumeration order.
    pub fn from_coeffs(dim: usize, order: usize, coeffs: Vec<f64>) -> Result<Self> {
        let n = count(dim, order);
        if coeffs.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: coeffs.len(),
            });
        }
        Ok(SymTensor { dim, order, coeffs })
    }

    /// The order-2 identity, so that `I : ∇²p = Δp`.
    pub fn identity(dim: usize) -> Self {
        SymTensor::from_fn(dim, 2, |a| {
            if a.entries().iter().any(|&e| e == 2) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Symmetric part of a `d×d` matrix `m[i][j]` as an order-2 tensor.
    pub fn from_matrix(m: &[Vec<f64>]) -> Self {
        let d = m.len();
        SymTensor::from_fn(d, 2, |a| {
            let idx: Vec<usize> = (0..d)
                .flat_map(|i| std::iter::repeat(i).take(a.entries()[i]))
                .collect();
            0.5 * (m[idx[0]][idx[1]] + m[idx[1]][idx[0]])
        })
    }

    /// Order-2 tensor as a full symmetric matrix.
    pub fn to_matrix(&self) -> Vec<Vec<f64>> {
        assert_eq!(self.order, 2, "to_matrix needs an order-2 tensor");
        let d = self.dim;
        let mut out = vec![vec![0.0; d]; d];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let mut a = vec![0; d];
                a[i] += 1;
                a[j] += 1;
                *v = self.coeffs[rank(&a)];
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn get(&self, alpha: &MultiIndex) -> f64 {
        debug_assert_eq!(alpha.order(), self.order);
        self.coeffs[rank(alpha.entries())]
    }

    pub fn get_raw(&self, alpha: &[usize]) -> f64 {
        self.coeffs[rank(alpha)]
    }

    pub fn set(&mut self, alpha: &MultiIndex, value: f64) {
        debug_assert_eq!(alpha.order(), self.order);
        let r = rank(alpha.entries());
        self.coeffs[r] = value;
    }

    pub fn add_at(&mut self, alpha: &[usize], value: f64) {
        let r = rank(alpha);
        self.coeffs[r] += value;
    }

    /// `(α, T_α)` pairs in enumeration order.
    pub fn iter(&self) -> impl Iterator<Item = (MultiIndex, f64)> + '_ {
        multi_indices(self.dim, self.order)
            .into_iter()
            .zip(self.coeffs.iter().copied())
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    pub fn norm(&self) -> f64 {
        let idx = multi_indices(self.dim, self.order);
        idx.iter()
            .zip(&self.coeffs)
            .map(|(a, c)| multinomial_f64(a.entries()) * c * c)
            .sum::<f64>()
            .sqrt()
    }

    /// Largest coefficient magnitude.
    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn scale(&self, s: f64) -> SymTensor {
        SymTensor {
            dim: self.dim,
            order: self.order,
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    fn check_same(&self, other: &SymTensor) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        if self.order != other.order {
            return Err(Error::OrderMismatch {
                expected: self.order,
                found: other.order,
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &SymTensor) -> Result<SymTensor> {
        self.check_same(other)?;
        Ok(SymTensor {
            dim: self.dim,
            order: self.order,
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &SymTensor) -> Result<SymTensor> {
        self.add(&other.scale(-1.0))
    }

    /// In-place `self += s·other`.
    pub fn axpy(&mut self, s: f64, other: &SymTensor) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += s * b;
        }
        Ok(())
    }

    /// Partial contraction over the first `S.order()` slots:
    /// `(T ⌟ S)_β = Σ_{|α|=k} (k!/α!) T_{α+β} S_α`.
    pub fn contract_partial(&self, s: &SymTensor) -> Result<SymTensor> {
        if self.dim != s.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: s.dim,
            });
        }
        if s.order > self.order {
            return Err(Error::OrderMismatch {
                expected: self.order,
                found: s.order,
            });
        }
        let d = self.dim;
        let k = s.order;
        let alphas = multi_indices(d, k);
        let weights: Vec<f64> = alphas.iter().map(|a| multinomial_f64(a.entries())).collect();
        let out = SymTensor::from_fn(d, self.order - k, |b| {
            let mut acc = 0.0;
            for ((a, w), sa) in alphas.iter().zip(&weights).zip(&s.coeffs) {
                if *sa != 0.0 {
                    acc += w * sa * self.get(&a.add(b));
                }
            }
            acc
        });
        Ok(out)
    }

    /// Little-endian bytes of the coefficients.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.coeffs.iter().flat_map(|c| c.to_le_bytes()).collect()
    }
}

/// `S:T = Σ_{|α|=m} (m!/α!) S_α T_α`.
pub fn contract(s: &SymTensor, t: &SymTensor) -> Result<f64> {
    s.check_same(t)?;
    let idx = multi_indices(s.dim, s.order);
    Ok(idx
        .iter()
        .zip(s.coeffs.iter().zip(&t.coeffs))
        .map(|(a, (x, y))| multinomial_f64(a.entries()) * x * y)
        .sum())
}

/// `x^⊗m`, with coefficient `x^α` at `α`.
pub fn tensor_power(x: &[f64], m: usize) -> SymTensor {
    SymTensor::from_fn(x.len(), m, |a| a.monomial(x))
}

/// Symmetrization of the outer product `S ⊗ T`.
pub fn symmetrized_product(s: &SymTensor, t: &SymTensor) -> Result<SymTensor> {
    if s.dim != t.dim {
        return Err(Error::DimensionMismatch {
            expected: s.dim,
            found: t.dim,
        });
    }
    let d = s.dim;
    let (j, k) = (s.order, t.order);
    let total = binomial_f64(j + k, j);
    let mut out = SymTensor::zeros(d, j + k);
    for (a, sa) in s.iter() {
        if sa == 0.0 {
            continue;
        }
        for (b, tb) in t.iter() {
            if tb == 0.0 {
                continue;
            }
            let g = a.add(&b);
            out.add_at(g.entries(), g.binomial(&a) / total * sa * tb);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mi(v: &[usize]) -> MultiIndex {
        MultiIndex::new(v.to_vec())
    }

    #[test]
    fn multinomial_examples() {
        assert_eq!(multinomial(2, &mi(&[1, 1])).unwrap(), 2);
        assert_eq!(multinomial(3, &mi(&[2, 1])).unwrap(), 3);
        assert_eq!(multinomial(4, &mi(&[4, 0])).unwrap(), 1);
    }

    #[test]
    fn multinomial_errors() {
        assert!(matches!(
            multinomial(3, &mi(&[1, 1])),
            Err(Error::OrderMismatch { .. })
        ));
        assert!(matches!(
            multinomial(21, &mi(&[11, 10])),
            Err(Error::Overflow(_))
        ));
        // 20!/(1!)^20 = 20! fits in u64
        assert_eq!(
            multinomial(20, &mi(&[1; 20])).unwrap(),
            2_432_902_008_176_640_000
        );
    }

    #[test]
    fn multinomial_matches_factorials() {
        // independent oracle: ratio of factorials in u128
        let fact = |n: usize| (1..=n as u128).product::<u128>();
        for m in 0..=12 {
            for a in multi_indices(3, m) {
                let denom: u128 = a.entries().iter().map(|&e| fact(e)).product();
                assert_eq!(multinomial(m, &a).unwrap() as u128, fact(m) / denom);
            }
        }
    }

    #[test]
    fn enumeration_is_colex() {
        let idx = multi_indices(2, 2);
        assert_eq!(idx, vec![mi(&[2, 0]), mi(&[1, 1]), mi(&[0, 2])]);
        let idx = multi_indices(3, 1);
        assert_eq!(idx, vec![mi(&[1, 0, 0]), mi(&[0, 1, 0]), mi(&[0, 0, 1])]);
        for d in 1..=4 {
            for m in 0..=6 {
                let idx = multi_indices(d, m);
                assert_eq!(idx.len(), count(d, m));
                for (i, a) in idx.iter().enumerate() {
                    assert_eq!(rank(a.entries()), i);
                }
            }
        }
    }

    #[test]
    fn contract_examples() {
        let x = tensor_power(&[1.0, 2.0], 2);
        assert_eq!(contract(&x, &x).unwrap(), 25.0);
        // ∇²(x₁²) has the single entry 2 at (2,0)
        let mut h = SymTensor::zeros(2, 2);
        h.set(&mi(&[2, 0]), 2.0);
        assert_eq!(contract(&SymTensor::identity(2), &h).unwrap(), 2.0);
        let e1 = tensor_power(&[1.0, 0.0], 3);
        let e2 = tensor_power(&[0.0, 1.0], 3);
        assert_eq!(contract(&e1, &e2).unwrap(), 0.0);
    }

    #[test]
    fn contract_mismatch() {
        let a = SymTensor::zeros(2, 2);
        let b = SymTensor::zeros(3, 2);
        let c = SymTensor::zeros(2, 3);
        assert!(contract(&a, &b).is_err());
        assert!(contract(&a, &c).is_err());
    }

    #[test]
    fn tensor_power_examples() {
        let t = tensor_power(&[1.0, 2.0], 2);
        assert_eq!(t.coeffs(), &[1.0, 2.0, 4.0]);
        let t = tensor_power(&[0.3, -7.0, 2.0], 0);
        assert_eq!(t.coeffs(), &[1.0]);
        let t = tensor_power(&[2.0, 0.0], 3);
        assert_eq!(t.get(&mi(&[3, 0])), 8.0);
        assert_eq!(t.coeffs().iter().filter(|&&c| c != 0.0).count(), 1);
    }

    #[test]
    fn symmetrized_product_examples() {
        let e1 = tensor_power(&[1.0, 0.0], 1);
        let e2 = tensor_power(&[0.0, 1.0], 1);
        let s = symmetrized_product(&e1, &e2).unwrap();
        assert_eq!(s.coeffs(), &[0.0, 0.5, 0.0]);

        let x = [0.7, -1.3];
        let s = symmetrized_product(&tensor_power(&x, 1), &tensor_power(&x, 1)).unwrap();
        let t = tensor_power(&x, 2);
        for (a, b) in s.coeffs().iter().zip(t.coeffs()) {
            assert!((a - b).abs() < 1e-15);
        }

        // (x·x)² at x = (1,1) is 4
        let id = SymTensor::identity(2);
        let ii = symmetrized_product(&id, &id).unwrap();
        let v = contract(&ii, &tensor_power(&[1.0, 1.0], 4)).unwrap();
        assert!((v - 4.0).abs() < 1e-14);
    }

    #[test]
    fn identity_is_trace() {
        let id = SymTensor::identity(3);
        let m = id.to_matrix();
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn partial_contraction_full_is_contract() {
        let x = [0.5, 1.5, -0.25];
        let s = tensor_power(&x, 3);
        let t = SymTensor::from_fn(3, 3, |a| a.entries()[0] as f64 - 0.5 * a.entries()[2] as f64);
        let full = t.contract_partial(&s).unwrap();
        assert_eq!(full.order(), 0);
        assert!((full.coeffs()[0] - contract(&t, &s).unwrap()).abs() < 1e-13);
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-2.0f64..2.0, d)
    }

    fn tensor_strategy(d: usize, m: usize) -> impl Strategy<Value = SymTensor> {
        proptest::collection::vec(-1.0f64..1.0, count(d, m))
            .prop_map(move |c| SymTensor::from_coeffs(d, m, c).unwrap())
    }

    proptest! {
        #[test]
        fn power_norm(x in vec_strategy(3), m in 0usize..9) {
            let n = tensor_power(&x, m).norm();
            let r: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let expected = r.powi(m as i32);
            prop_assert!((n - expected).abs() <= 1e-12 * expected.max(1.0));
        }

        #[test]
        fn multinomial_theorem(x in vec_strategy(3), y in vec_strategy(3), m in 0usize..9) {
            let c = contract(&tensor_power(&x, m), &tensor_power(&y, m)).unwrap();
            let dot: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            let scale: f64 = x.iter().chain(&y).fold(1.0f64, |a, v| a.max(v.abs()));
            prop_assert!((c - dot.powi(m as i32)).abs() <= 1e-11 * scale.powi(2 * m as i32));
        }

        #[test]
        fn contract_symmetric_bilinear(
            s in tensor_strategy(2, 4), t in tensor_strategy(2, 4), u in tensor_strategy(2, 4),
            a in -2.0f64..2.0,
        ) {
            let st = contract(&s, &t).unwrap();
            prop_assert!((st - contract(&t, &s).unwrap()).abs() < 1e-13);
            let lhs = contract(&s.scale(a).add(&u).unwrap(), &t).unwrap();
            let rhs = a * st + contract(&u, &t).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
            prop_assert!(contract(&s, &s).unwrap() >= 0.0);
        }

        #[test]
        fn symmetrized_product_associative(
            a in tensor_strategy(2, 1), b in tensor_strategy(2, 2), c in tensor_strategy(2, 3),
        ) {
            let left = symmetrized_product(&symmetrized_product(&a, &b).unwrap(), &c).unwrap();
            let right = symmetrized_product(&a, &symmetrized_product(&b, &c).unwrap()).unwrap();
            for (x, y) in left.coeffs().iter().zip(right.coeffs()) {
                prop_assert!((x - y).abs() < 1e-13);
            }
        }

        #[test]
        fn symmetrized_product_commutative(a in tensor_strategy(3, 2), b in tensor_strategy(3, 3)) {
            let ab = symmetrized_product(&a, &b).unwrap();
            let ba = symmetrized_product(&b, &a).unwrap();
            for (x, y) in ab.coeffs().iter().zip(ba.coeffs()) {
                prop_assert!((x - y).abs() < 1e-14);
            }
        }

        #[test]
        fn product_of_powers(x in vec_strategy(2), j in 0usize..4, k in 0usize..4) {
            let p = symmetrized_product(&tensor_power(&x, j), &tensor_power(&x, k)).unwrap();
            let q = tensor_power(&x, j + k);
            for (a, b) in p.coeffs().iter().zip(q.coeffs()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
