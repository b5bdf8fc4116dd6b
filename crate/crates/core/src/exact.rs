//! Exact rational polynomial arithmetic for identity checks.
//!
//! Every `f64` is a dyadic rational, so [`RationalPolynomial::from_poly`] is
//! lossless and the inverses below satisfy their equations with zero residual.
//! Only the operations needed to verify the polynomial calculus are provided.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::polynomials::{HomogenizedTensorSequence, Polynomial};
use crate::tensors::{count, multi_indices, MultiIndex, SymTensor};

pub type Rational = BigRational;

fn rat(v: f64) -> Result<Rational> {
    Rational::from_float(v).ok_or_else(|| Error::NonFinite("rational conversion".into()))
}

fn int(v: u64) -> Rational {
    Rational::from_integer(BigInt::from(v))
}

/// A polynomial as a map from exponent vectors to nonzero coefficients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RationalPolynomial {
    dim: usize,
    terms: BTreeMap<Vec<usize>, Rational>,
}

/// A symmetric tensor stored by distinct multi-index, like [`SymTensor`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RationalTensor {
    dim: usize,
    order: usize,
    entries: BTreeMap<Vec<usize>, Rational>,
}

impl RationalTensor {
    pub fn from_sym(t: &SymTensor) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (a, v) in t.iter() {
            if v != 0.0 {
                entries.insert(a.entries().to_vec(), rat(v)?);
            }
        }
        Ok(RationalTensor {
            dim: t.dim(),
            order: t.order(),
            entries,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Symmetric matrix entries of an order-2 tensor.
    fn matrix(&self) -> Vec<Vec<Rational>> {
        let d = self.dim;
        let mut m = vec![vec![Rational::zero(); d]; d];
        for (a, v) in &self.entries {
            let idx: Vec<usize> = (0..d).flat_map(|i| std::iter::repeat(i).take(a[i])).collect();
            m[idx[0]][idx[1]] = v.clone();
            m[idx[1]][idx[0]] = v.clone();
        }
        m
    }
}

fn multinomial(a: &[usize]) -> Rational {
    let mut acc = BigInt::one();
    let mut s = 0u64;
    let mut den = BigInt::one();
    for &k in a {
        for j in 1..=k as u64 {
            s += 1;
            acc *= s;
            den *= j;
        }
    }
    Rational::new(acc, den)
}

impl RationalPolynomial {
    pub fn zero(dim: usize) -> Self {
        RationalPolynomial {
            dim,
            terms: BTreeMap::new(),
        }
    }

    pub fn from_poly(p: &Polynomial) -> Result<Self> {
        let mut out = RationalPolynomial::zero(p.dim());
        for k in 0..=p.stored_degree() {
            for (a, c) in multi_indices(p.dim(), k).iter().zip(p.monomials(k)) {
                if c != 0.0 {
                    out.terms.insert(a.entries().to_vec(), rat(c)?);
                }
            }
        }
        Ok(out)
    }

    /// Rounds every coefficient to the nearest `f64`.
    pub fn to_poly(&self) -> Polynomial {
        let deg = self.degree();
        let layers: Vec<Vec<f64>> = (0..=deg)
            .map(|k| {
                multi_indices(self.dim, k)
                    .iter()
                    .map(|a| self.terms.get(a.entries()).map_or(0.0, |c| c.to_f64().unwrap_or(f64::NAN)))
                    .collect()
            })
            .collect();
        debug_assert!(layers.iter().enumerate().all(|(k, l)| l.len() == count(self.dim, k)));
        Polynomial::from_monomials(self.dim, &layers)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.terms.keys().map(|a| a.iter().sum()).max().unwrap_or(0)
    }

    pub fn coeff(&self, alpha: &MultiIndex) -> Rational {
        self.terms.get(alpha.entries()).cloned().unwrap_or_else(Rational::zero)
    }

    /// Largest coefficient in absolute value.
    pub fn max_abs(&self) -> Rational {
        self.terms
            .values()
            .map(|c| c.abs())
            .max()
            .unwrap_or_else(Rational::zero)
    }

    fn insert_add(&mut self, a: Vec<usize>, c: Rational) {
        use std::collections::btree_map::Entry;
        if c.is_zero() {
            return;
        }
        match self.terms.entry(a) {
            Entry::Vacant(v) => {
                v.insert(c);
            }
            Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if o.get().is_zero() {
                    o.remove();
                }
            }
        }
    }

    pub fn add(&self, other: &RationalPolynomial) -> RationalPolynomial {
        let mut out = self.clone();
        out.add_scaled(other, &Rational::one());
        out
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &RationalPolynomial, s: &Rational) {
        for (a, c) in &other.terms {
            self.insert_add(a.clone(), c * s);
        }
    }

    pub fn sub(&self, other: &RationalPolynomial) -> RationalPolynomial {
        let mut out = self.clone();
        out.add_scaled(other, &-Rational::one());
        out
    }

    pub fn scale(&self, s: &Rational) -> RationalPolynomial {
        if s.is_zero() {
            return RationalPolynomial::zero(self.dim);
        }
        RationalPolynomial {
            dim: self.dim,
            terms: self.terms.iter().map(|(a, c)| (a.clone(), c * s)).collect(),
        }
    }

    pub fn mul(&self, other: &RationalPolynomial) -> RationalPolynomial {
        let mut out = RationalPolynomial::zero(self.dim);
        for (a, c) in &self.terms {
            for (b, e) in &other.terms {
                let ab: Vec<usize> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                out.insert_add(ab, c * e);
            }
        }
        out
    }

    /// `∂^β p`.
    pub fn derivative(&self, beta: &[usize]) -> RationalPolynomial {
        let mut out = RationalPolynomial::zero(self.dim);
        for (a, c) in &self.terms {
            if a.iter().zip(beta).any(|(x, y)| x < y) {
                continue;
            }
            let mut f = BigInt::one();
            for (&x, &y) in a.iter().zip(beta) {
                for j in (x - y + 1)..=x {
                    f *= j as u64;
                }
            }
            let rest: Vec<usize> = a.iter().zip(beta).map(|(x, y)| x - y).collect();
            out.insert_add(rest, c * Rational::from_integer(f));
        }
        out
    }

    /// `T : ∇^n p`.
    pub fn contract_derivatives(&self, t: &RationalTensor) -> RationalPolynomial {
        let mut out = RationalPolynomial::zero(self.dim);
        for (b, v) in &t.entries {
            out.add_scaled(&self.derivative(b), &(multinomial(b) * v));
        }
        out
    }

    fn homogeneous_part(&self, k: usize) -> RationalPolynomial {
        RationalPolynomial {
            dim: self.dim,
            terms: self
                .terms
                .iter()
                .filter(|(a, _)| a.iter().sum::<usize>() == k)
                .map(|(a, c)| (a.clone(), c.clone()))
                .collect(),
        }
    }
}

/// Exact copy of a tensor sequence.
#[derive(Clone, Debug)]
pub struct RationalSequence {
    tensors: Vec<RationalTensor>,
}

impl RationalSequence {
    pub fn from_sequence(a: &HomogenizedTensorSequence) -> Result<Self> {
        Ok(RationalSequence {
            tensors: a.tensors().iter().map(RationalTensor::from_sym).collect::<Result<_>>()?,
        })
    }

    fn abar(&self) -> &RationalTensor {
        &self.tensors[0]
    }
}

/// `𝒜p = Σ_n ā^(n) : ∇^n p`.
pub fn apply_macroscopic_exact(p: &RationalPolynomial, a: &RationalSequence) -> RationalPolynomial {
    let mut out = RationalPolynomial::zero(p.dim());
    for t in &a.tensors {
        out.add_scaled(&p.contract_derivatives(t), &Rational::one());
    }
    out
}

fn inverse(m: &[Vec<Rational>]) -> Result<Vec<Vec<Rational>>> {
    let d = m.len();
    let mut a: Vec<Vec<Rational>> = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..d).map(|j| if i == j { Rational::one() } else { Rational::zero() }));
            r
        })
        .collect();
    for c in 0..d {
        let piv = (c..d)
            .find(|&r| !a[r][c].is_zero())
            .ok_or(Error::NotPositiveDefinite(0.0))?;
        a.swap(c, piv);
        let inv = Rational::one() / &a[c][c];
        for v in a[c].iter_mut() {
            *v *= &inv;
        }
        for r in 0..d {
            if r != c && !a[r][c].is_zero() {
                let f = a[r][c].clone();
                for j in 0..2 * d {
                    let t = &a[c][j] * &f;
                    a[r][j] -= t;
                }
            }
        }
    }
    Ok(a.into_iter().map(|r| r[d..].to_vec()).collect())
}

/// `Q(x) = xᵀ ā⁻¹ x`.
fn quadratic(abar: &RationalTensor) -> Result<RationalPolynomial> {
    let d = abar.dim;
    let inv = inverse(&abar.matrix())?;
    let mut q = RationalPolynomial::zero(d);
    for i in 0..d {
        for j in 0..d {
            let mut e = vec![0; d];
            e[i] += 1;
            e[j] += 1;
            q.insert_add(e, inv[i][j].clone());
        }
    }
    Ok(q)
}

/// Solves `−ā:∇²q = p` for homogeneous `p` by the same closed form as
/// [`crate::polynomials::invert_laplacian_homogeneous`].
pub fn invert_laplacian_exact(p: &RationalPolynomial, abar: &RationalTensor) -> Result<RationalPolynomial> {
    if abar.order != 2 {
        return Err(Error::OrderMismatch {
            expected: 2,
            found: abar.order,
        });
    }
    let m = p.degree();
    if p.terms.keys().any(|a| a.iter().sum::<usize>() != m) {
        return Err(Error::NotHomogeneous(m));
    }
    Ok(laplacian_layer(p, abar, &quadratic(abar)?))
}

fn laplacian_layer(p: &RationalPolynomial, abar: &RationalTensor, quad: &RationalPolynomial) -> RationalPolynomial {
    let d = p.dim();
    let m = p.degree();
    let mut q = RationalPolynomial::zero(d);
    let mut a_j = Rational::one();
    let mut lap_j = p.clone();
    let mut quad_j = quad.clone();
    for j in 0..=m / 2 {
        a_j /= int((2 * (j + 1) * (2 * (m - j) + d)) as u64);
        q.add_scaled(&quad_j.mul(&lap_j), &-a_j.clone());
        lap_j = lap_j.contract_derivatives(abar).scale(&-Rational::one());
        quad_j = quad_j.mul(quad);
    }
    q.homogeneous_part(m + 2)
}

fn invert_order_two(p: &RationalPolynomial, abar: &RationalTensor, quad: &RationalPolynomial) -> RationalPolynomial {
    let mut q = RationalPolynomial::zero(p.dim());
    for k in 0..=p.degree() {
        let layer = p.homogeneous_part(k);
        if !layer.is_zero() {
            q.add_scaled(&laplacian_layer(&layer, abar, quad), &Rational::one());
        }
    }
    q
}

/// Solves `−𝒜q = p` with `q(0) = 0`, `∇q(0) = 0`; the iteration stops when a
/// correction vanishes, which it does after at most `deg p + 1` steps.
pub fn invert_macroscopic_exact(p: &RationalPolynomial, a: &RationalSequence) -> Result<RationalPolynomial> {
    let higher = RationalSequence {
        tensors: a.tensors[1..].to_vec(),
    };
    let quad = quadratic(a.abar())?;
    let mut cur = invert_order_two(p, a.abar(), &quad);
    let mut total = cur.clone();
    while !cur.is_zero() {
        cur = invert_order_two(&apply_macroscopic_exact(&cur, &higher), a.abar(), &quad);
        total.add_scaled(&cur, &Rational::one());
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polynomials::{apply_macroscopic, invert_macroscopic};

    fn seq() -> HomogenizedTensorSequence {
        let abar = SymTensor::from_matrix(&[vec![1.5, 0.25], vec![0.25, 1.0]]);
        let t3 = SymTensor::from_fn(2, 3, |a| 0.125 * a.entries()[0] as f64 - 0.0625);
        let t4 = SymTensor::from_fn(2, 4, |a| 0.03125 * (a.entries()[1] as f64 + 1.0));
        HomogenizedTensorSequence::new(2, vec![abar, t3, t4]).unwrap()
    }

    #[test]
    fn conversion_is_lossless() {
        let p = Polynomial::from_monomials(2, &[vec![0.1], vec![1.0 / 3.0, -2.5], vec![1e-300, 0.0, 7.0]]);
        assert_eq!(RationalPolynomial::from_poly(&p).unwrap().to_poly(), p);
    }

    #[test]
    fn macroscopic_matches_float_operator() {
        let a = seq();
        let p = Polynomial::from_monomials(2, &[vec![1.0], vec![0.5, -1.0], vec![0.25, 2.0, -0.5], vec![1.0, 0.0, 0.0, 1.0], vec![0.5, 0.0, 1.0, 0.0, -1.0]]);
        let exact = apply_macroscopic_exact(&RationalPolynomial::from_poly(&p).unwrap(), &RationalSequence::from_sequence(&a).unwrap());
        assert!(exact.to_poly().sub(&apply_macroscopic(&p, &a)).max_coeff() < 1e-14);
    }

    #[test]
    fn exact_inverse_has_zero_residual_and_matches_float() {
        let a = seq();
        let ra = RationalSequence::from_sequence(&a).unwrap();
        let p = Polynomial::from_monomials(2, &[vec![1.0], vec![0.5, -1.0], vec![0.25, 2.0, -0.5], vec![1.0, 0.0, 0.0, 1.0]]);
        let rp = RationalPolynomial::from_poly(&p).unwrap();
        let q = invert_macroscopic_exact(&rp, &ra).unwrap();
        assert!(apply_macroscopic_exact(&q, &ra).add(&rp).is_zero());
        for k in 0..2 {
            for al in multi_indices(2, k) {
                assert!(q.coeff(&al).is_zero());
            }
        }
        let qf = invert_macroscopic(&p, &a).unwrap();
        assert!(qf.sub(&q.to_poly()).max_coeff() <= 1e-14 * q.to_poly().max_coeff());
    }

    #[test]
    fn laplacian_example() {
        let id = RationalTensor::from_sym(&SymTensor::identity(3)).unwrap();
        let p = RationalPolynomial::from_poly(&Polynomial::monomial(&MultiIndex::new(vec![2, 0, 1]), 1.0)).unwrap();
        let q = invert_laplacian_exact(&p, &id).unwrap();
        assert!(q.contract_derivatives(&id).add(&p).is_zero());
        assert_eq!(q.degree(), 5);
    }
}
