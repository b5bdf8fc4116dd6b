//! Polynomials stored as Taylor tensors at the origin.
//!
//! A polynomial of degree `m` is `p(x) = Σ_k (1/k!) G^(k) : x^⊗k` with
//! `G^(k) = ∇^k p(0)`. The monomial coefficient of `x^α` is `G_α / α!`.
//!
//! All arithmetic is in `f64`. Identities that hold exactly in rational
//! arithmetic are checked against [`POLY_TOL`] relative to the input size.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensors::{
    count, multi_indices, rank, tensor_power, MultiIndex, SymTensor,
};

/// Coefficient tolerance for identities that are exact in rational arithmetic.
pub const POLY_TOL: f64 = 1e-12;

/// Tolerance for the ā-harmonicity check in [`harmonic_twist`].
pub const HARMONIC_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    dim: usize,
    taylor: Vec<SymTensor>,
}

impl Polynomial {
    pub fn zero(dim: usize) -> Self {
        Polynomial {
            dim,
            taylor: vec![SymTensor::zeros(dim, 0)],
        }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Polynomial {
            dim,
            taylor: vec![SymTensor::scalar(dim, c)],
        }
    }

    /// The coordinate function `x_i`.
    pub fn coordinate(dim: usize, i: usize) -> Self {
        Polynomial::monomial(&MultiIndex::unit(dim, i), 1.0)
    }

    /// `c · x^α`.
    pub fn monomial(alpha: &MultiIndex, c: f64) -> Self {
        let d = alpha.dim();
        let m = alpha.order();
        let mut taylor: Vec<SymTensor> = (0..=m).map(|k| SymTensor::zeros(d, k)).collect();
        taylor[m].set(alpha, c * alpha.factorial());
        Polynomial { dim: d, taylor }
    }

    /// From Taylor tensors `G^(0), G^(1), …`; tensor `k` must have order `k`.
    pub fn from_taylor(dim: usize, taylor: Vec<SymTensor>) -> Result<Self> {
        if taylor.is_empty() {
            return Ok(Polynomial::zero(dim));
        }
        for (k, t) in taylor.iter().enumerate() {
            if t.order() != k {
                return Err(Error::OrderMismatch {
                    expected: k,
                    found: t.order(),
                });
            }
            if t.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: t.dim(),
                });
            }
        }
        Ok(Polynomial { dim, taylor })
    }

    /// From monomial coefficients, one vector per degree in enumeration order.
    pub fn from_monomials(dim: usize, layers: &[Vec<f64>]) -> Self {
        let taylor = layers
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let idx = multi_indices(dim, k);
                let coeffs = idx.iter().zip(c).map(|(a, v)| a.factorial() * v).collect();
                SymTensor::from_coeffs(dim, k, coeffs).expect("layer size")
            })
            .collect::<Vec<_>>();
        if taylor.is_empty() {
            Polynomial::zero(dim)
        } else {
            Polynomial { dim, taylor }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Largest `k` with a stored tensor, regardless of whether it is zero.
    pub fn stored_degree(&self) -> usize {
        self.taylor.len() - 1
    }

    /// Largest `k` with `G^(k) ≠ 0`, and 0 for the zero polynomial.
    pub fn degree(&self) -> usize {
        (0..self.taylor.len())
            .rev()
            .find(|&k| !self.taylor[k].is_zero())
            .unwrap_or(0)
    }

    /// `∇^k p(0)`, zero beyond the stored degree.
    pub fn taylor(&self, k: usize) -> SymTensor {
        self.taylor
            .get(k)
            .cloned()
            .unwrap_or_else(|| SymTensor::zeros(self.dim, k))
    }

    pub fn taylor_ref(&self) -> &[SymTensor] {
        &self.taylor
    }

    /// Monomial coefficients of degree `k`, in enumeration order.
    pub fn monomials(&self, k: usize) -> Vec<f64> {
        let t = self.taylor(k);
        multi_indices(self.dim, k)
            .iter()
            .zip(t.coeffs())
            .map(|(a, g)| g / a.factorial())
            .collect()
    }

    /// The homogeneous part of degree `k`.
    pub fn homogeneous_part(&self, k: usize) -> Polynomial {
        let mut taylor: Vec<SymTensor> = (0..k).map(|j| SymTensor::zeros(self.dim, j)).collect();
        taylor.push(self.taylor(k));
        Polynomial {
            dim: self.dim,
            taylor,
        }
    }

    /// Keeps degrees `≤ m`.
    pub fn truncate(&self, m: usize) -> Polynomial {
        let taylor = (0..=m).map(|k| self.taylor(k)).collect();
        Polynomial {
            dim: self.dim,
            taylor,
        }
    }

    /// `sqrt(Σ_k |∇^k p(0)|²)`.
    pub fn norm(&self) -> f64 {
        self.taylor
            .iter()
            .map(|t| t.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest monomial coefficient magnitude.
    pub fn max_coeff(&self) -> f64 {
        (0..self.taylor.len())
            .flat_map(|k| self.monomials(k))
            .fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (k, t) in self.taylor.iter().enumerate() {
            for (a, g) in multi_indices(self.dim, k).iter().zip(t.coeffs()) {
                if *g != 0.0 {
                    acc += g / a.factorial() * a.monomial(x);
                }
            }
        }
        acc
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        Polynomial {
            dim: self.dim,
            taylor: self.taylor.iter().map(|t| t.scale(s)).collect(),
        }
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        assert_eq!(self.dim, other.dim, "polynomial dimensions differ");
        let n = self.taylor.len().max(other.taylor.len());
        let taylor = (0..n)
            .map(|k| self.taylor(k).add(&other.taylor(k)).expect("same shape"))
            .collect();
        Polynomial {
            dim: self.dim,
            taylor,
        }
    }

    pub fn sub(&self, other: &Polynomial) -> Polynomial {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        assert_eq!(self.dim, other.dim, "polynomial dimensions differ");
        let d = self.dim;
        let (da, db) = (self.stored_degree(), other.stored_degree());
        let mut out: Vec<Vec<f64>> = (0..=da + db).map(|k| vec![0.0; count(d, k)]).collect();
        for i in 0..=da {
            let ca = self.monomials(i);
            if ca.iter().all(|&c| c == 0.0) {
                continue;
            }
            let ia = multi_indices(d, i);
            for j in 0..=db {
                let cb = other.monomials(j);
                if cb.iter().all(|&c| c == 0.0) {
                    continue;
                }
                let ib = multi_indices(d, j);
                for (a, x) in ia.iter().zip(&ca) {
                    if *x == 0.0 {
                        continue;
                    }
                    for (b, y) in ib.iter().zip(&cb) {
                        out[i + j][rank(a.add(b).entries())] += x * y;
                    }
                }
            }
        }
        Polynomial::from_monomials(d, &out)
    }

    pub fn pow(&self, n: usize) -> Polynomial {
        let mut r = Polynomial::constant(self.dim, 1.0);
        for _ in 0..n {
            r = r.mul(self);
        }
        r
    }

    /// `∂^α p`.
    pub fn derivative(&self, alpha: &MultiIndex) -> Polynomial {
        let s = alpha.order();
        if s > self.stored_degree() {
            return Polynomial::zero(self.dim);
        }
        let taylor = (0..=self.stored_degree() - s)
            .map(|k| {
                let g = &self.taylor[k + s];
                SymTensor::from_fn(self.dim, k, |b| g.get(&b.add(alpha)))
            })
            .collect();
        Polynomial {
            dim: self.dim,
            taylor,
        }
    }

    /// The polynomial `T : ∇^n p`, where `n` is the order of `T`.
    pub fn contract_derivatives(&self, t: &SymTensor) -> Polynomial {
        let n = t.order();
        if n > self.stored_degree() {
            return Polynomial::zero(self.dim);
        }
        let taylor = (0..=self.stored_degree() - n)
            .map(|k| self.taylor[k + n].contract_partial(t).expect("same dimension"))
            .collect();
        Polynomial {
            dim: self.dim,
            taylor,
        }
    }

    /// `x ↦ p(x + y)`.
    pub fn translate(&self, y: &[f64]) -> Polynomial {
        let mut out = self.clone();
        let mut fact = 1.0;
        for n in 1..=self.stored_degree() {
            fact *= n as f64;
            let term = self.contract_derivatives(&tensor_power(y, n));
            out = out.add(&term.scale(1.0 / fact));
        }
        out.truncate(self.stored_degree())
    }

    /// `x ↦ p(Bx)` for a `d×d` matrix `B` given by rows.
    pub fn compose_linear(&self, b: &[Vec<f64>]) -> Polynomial {
        let d = self.dim;
        let lin: Vec<Polynomial> = (0..d)
            .map(|i| {
                let mut layer = vec![0.0; d];
                layer.copy_from_slice(&b[i]);
                Polynomial::from_monomials(d, &[vec![0.0], layer])
            })
            .collect();
        let mut out = Polynomial::zero(d);
        for k in 0..=self.stored_degree() {
            for (a, c) in multi_indices(d, k).iter().zip(self.monomials(k)) {
                if c == 0.0 {
                    continue;
                }
                let mut term = Polynomial::constant(d, c);
                for (i, &e) in a.entries().iter().enumerate() {
                    if e > 0 {
                        term = term.mul(&lin[i].pow(e));
                    }
                }
                out = out.add(&term);
            }
        }
        out.truncate(self.stored_degree())
    }

    /// `D_i p = p(· + e_i) − p`.
    pub fn forward_difference(&self, i: usize) -> Polynomial {
        let mut e = vec![0.0; self.dim];
        e[i] = 1.0;
        self.translate(&e).sub(self)
    }

    /// Whether all layers except degree `m` vanish to `tol · |p|`.
    pub fn is_homogeneous(&self, m: usize, tol: f64) -> bool {
        let scale = self.norm().max(f64::MIN_POSITIVE);
        self.taylor
            .iter()
            .enumerate()
            .all(|(k, t)| k == m || t.norm() <= tol * scale)
    }

    /// Flat coefficient array: the Taylor tensors in order, each in enumeration order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.taylor.iter().flat_map(|t| t.coeffs().to_vec()).collect()
    }

    pub fn from_flat(dim: usize, degree: usize, data: &[f64]) -> Result<Self> {
        let mut taylor = Vec::with_capacity(degree + 1);
        let mut off = 0;
        for k in 0..=degree {
            let n = count(dim, k);
            if off + n > data.len() {
                return Err(Error::Truncated {
                    expected: off + n,
                    found: data.len(),
                });
            }
            taylor.push(SymTensor::from_coeffs(dim, k, data[off..off + n].to_vec())?);
            off += n;
        }
        Ok(Polynomial { dim, taylor })
    }
}

pub fn eval_poly(p: &Polynomial, x: &[f64]) -> Result<f64> {
    if x.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            found: x.len(),
        });
    }
    Ok(p.eval(x))
}

pub fn derivative_poly(p: &Polynomial, alpha: &MultiIndex) -> Polynomial {
    p.derivative(alpha)
}

/// `D^α p` with `D_i u(x) = u(x + e_i) − u(x)`.
pub fn finite_difference_poly(p: &Polynomial, alpha: &MultiIndex) -> Polynomial {
    let mut out = p.clone();
    for (i, &a) in alpha.entries().iter().enumerate() {
        for _ in 0..a {
            out = out.forward_difference(i);
        }
    }
    out
}

/// `D^k p(0)` for `k = 0..=m`, as symmetric tensors over shift multi-indices.
pub fn differences_at_origin(p: &Polynomial, m: usize) -> Vec<SymTensor> {
    let origin = vec![0.0; p.dim()];
    (0..=m)
        .map(|k| {
            SymTensor::from_fn(p.dim(), k, |a| {
                finite_difference_poly(p, a).eval(&origin)
            })
        })
        .collect()
}

/// The unique `p ∈ P_m` with `D^k p(0) = diffs[k]`, by the Newton series
/// `p(x) = Σ_α D^α p(0) Π_i C(x_i, α_i)`.
pub fn differences_to_derivatives(d: usize, diffs: &[SymTensor]) -> Result<Polynomial> {
    for (k, t) in diffs.iter().enumerate() {
        if t.order() != k {
            return Err(Error::OrderMismatch {
                expected: k,
                found: t.order(),
            });
        }
        if t.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: t.dim(),
            });
        }
    }
    let m = diffs.len().saturating_sub(1);
    // falling[i][a] = C(x_i, a) as a polynomial
    let falling: Vec<Vec<Polynomial>> = (0..d)
        .map(|i| {
            let xi = Polynomial::coordinate(d, i);
            let mut out = vec![Polynomial::constant(d, 1.0)];
            for a in 1..=m {
                let step = xi.sub(&Polynomial::constant(d, (a - 1) as f64)).scale(1.0 / a as f64);
                let next = out[a - 1].mul(&step);
                out.push(next);
            }
            out
        })
        .collect();
    let mut p = Polynomial::zero(d);
    for t in diffs {
        for (a, v) in t.iter() {
            if v == 0.0 {
                continue;
            }
            let mut term = Polynomial::constant(d, v);
            for (i, &e) in a.entries().iter().enumerate() {
                if e > 0 {
                    term = term.mul(&falling[i][e]);
                }
            }
            p = p.add(&term);
        }
    }
    Ok(p.truncate(m))
}

/// The sequence `ā^(2), …, ā^(M)`; `ā^(1)` is implicitly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct HomogenizedTensorSequence {
    dim: usize,
    tensors: Vec<SymTensor>,
}

impl HomogenizedTensorSequence {
    /// `tensors[j]` must have order `j + 2`.
    pub fn new(dim: usize, tensors: Vec<SymTensor>) -> Result<Self> {
        if tensors.is_empty() {
            return Err(Error::InvalidParameter(
                "a tensor sequence needs at least the order-2 member".into(),
            ));
        }
        for (j, t) in tensors.iter().enumerate() {
            if t.order() != j + 2 {
                return Err(Error::OrderMismatch {
                    expected: j + 2,
                    found: t.order(),
                });
            }
            if t.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: t.dim(),
                });
            }
        }
        Ok(HomogenizedTensorSequence { dim, tensors })
    }

    /// `ā^(2) = abar`, all higher orders zero up to `max_order`.
    pub fn constant(abar: SymTensor, max_order: usize) -> Self {
        let d = abar.dim();
        let mut tensors = vec![abar];
        for k in 3..=max_order {
            tensors.push(SymTensor::zeros(d, k));
        }
        HomogenizedTensorSequence { dim: d, tensors }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_order(&self) -> usize {
        self.tensors.len() + 1
    }

    /// `ā^(n)`, `None` for `n < 2` or `n` beyond the truncation order.
    pub fn get(&self, n: usize) -> Option<&SymTensor> {
        if n < 2 {
            None
        } else {
            self.tensors.get(n - 2)
        }
    }

    pub fn abar(&self) -> &SymTensor {
        &self.tensors[0]
    }

    pub fn tensors(&self) -> &[SymTensor] {
        &self.tensors
    }
}

/// `𝒜p = Σ_{n=2}^{min(m,M)} ā^(n) : ∇^n p`. Orders beyond `M` count as zero.
pub fn apply_macroscopic(p: &Polynomial, a: &HomogenizedTensorSequence) -> Polynomial {
    let mut out = Polynomial::zero(p.dim());
    for n in 2..=a.max_order().min(p.stored_degree()) {
        out = out.add(&p.contract_derivatives(a.get(n).expect("in range")));
    }
    out
}

/// Principal square root of a symmetric positive definite matrix and its inverse.
fn spd_sqrt(abar: &SymTensor) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let d = abar.dim();
    let m = abar.to_matrix();
    let mat = DMatrix::from_fn(d, d, |i, j| m[i][j]);
    let eig = SymmetricEigen::new(mat);
    let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(lmin > 0.0) {
        return Err(Error::NotPositiveDefinite(lmin));
    }
    let v = &eig.eigenvectors;
    let build = |f: &dyn Fn(f64) -> f64| {
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| (0..d).map(|k| v[(i, k)] * f(eig.eigenvalues[k]) * v[(j, k)]).sum())
                    .collect()
            })
            .collect::<Vec<Vec<f64>>>()
    };
    Ok((build(&|l| l.sqrt()), build(&|l| 1.0 / l.sqrt())))
}

fn is_identity(abar: &SymTensor) -> bool {
    *abar == SymTensor::identity(abar.dim())
}

/// Solves `−∇·ā∇q = p` for homogeneous `p` of degree `m`, returning the
/// homogeneous `q` of degree `m+2` given by
/// `q = −Σ_j a_{j,m} Q^{j+1} (−L)^j p`, where `L = ā:∇²` and
/// `Q(x) = |B⁻¹x|²` with `B` the principal square root of `ā`.
/// For `ā = Id` this is `Q = |x|²` and `L = Δ`.
pub fn invert_laplacian_homogeneous(p: &Polynomial, abar: &SymTensor) -> Result<Polynomial> {
    let d = p.dim();
    if abar.order() != 2 {
        return Err(Error::OrderMismatch {
            expected: 2,
            found: abar.order(),
        });
    }
    if abar.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: abar.dim(),
        });
    }
    let m = p.degree();
    if !p.is_homogeneous(m, POLY_TOL) {
        return Err(Error::NotHomogeneous(m));
    }
    let quad = if is_identity(abar) {
        quadratic_form(d, &identity_rows(d))
    } else {
        let (_, binv) = spd_sqrt(abar)?;
        quadratic_form(d, &binv)
    };
    let p = p.homogeneous_part(m);
    let mut q = Polynomial::zero(d);
    let mut a_j = 1.0;
    let mut lap_j = p.clone(); // (−L)^j p
    let mut quad_j = quad.clone(); // Q^{j+1}
    for j in 0..=m / 2 {
        a_j /= (2 * (j + 1) * (2 * (m - j) + d)) as f64;
        q = q.sub(&quad_j.mul(&lap_j).scale(a_j));
        lap_j = lap_j.contract_derivatives(abar).scale(-1.0);
        quad_j = quad_j.mul(&quad);
    }
    Ok(q.homogeneous_part(m + 2))
}

fn identity_rows(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// `|Bx|²` as a polynomial.
fn quadratic_form(d: usize, b: &[Vec<f64>]) -> Polynomial {
    let mut out = Polynomial::zero(d);
    for row in b {
        let lin = Polynomial::from_monomials(d, &[vec![0.0], row.clone()]);
        out = out.add(&lin.mul(&lin));
    }
    out
}

/// `A ↦` the layer-wise solution of `−ā:∇²q = p` with `q(0) = 0, ∇q(0) = 0`.
fn invert_order_two(p: &Polynomial, abar: &SymTensor) -> Result<Polynomial> {
    let mut q = Polynomial::zero(p.dim());
    for k in 0..=p.stored_degree() {
        let layer = p.homogeneous_part(k);
        if layer.taylor(k).is_zero() {
            continue;
        }
        q = q.add(&invert_laplacian_homogeneous(&layer, abar)?);
    }
    Ok(q)
}

/// Solves `−𝒜q = p` with `q(0) = 0` and `∇q(0) = 0` by the finite iteration
/// `q_0 = L⁻¹p`, `q_k = L⁻¹((𝒜 − ā:∇²) q_{k−1})`.
pub fn invert_macroscopic(p: &Polynomial, a: &HomogenizedTensorSequence) -> Result<Polynomial> {
    let mut q = invert_macroscopic_once(p, a)?;
    // refinement against accumulated rounding
    for _ in 0..2 {
        let res = p.add(&apply_macroscopic(&q, a)).truncate(p.stored_degree());
        if res.max_coeff() <= f64::EPSILON * p.max_coeff() {
            break;
        }
        q = q.add(&invert_macroscopic_once(&res, a)?);
    }
    Ok(q)
}

fn invert_macroscopic_once(p: &Polynomial, a: &HomogenizedTensorSequence) -> Result<Polynomial> {
    let abar = a.abar();
    spd_sqrt(abar)?;
    let higher = HomogenizedTensorSequence {
        dim: a.dim,
        tensors: std::iter::once(SymTensor::zeros(a.dim, 2))
            .chain(a.tensors[1..].iter().cloned())
            .collect(),
    };
    let mut total = invert_order_two(p, abar)?;
    let mut cur = total.clone();
    let mut deg = p.stored_degree() + 2;
    // Each step lowers the degree by at least one.
    while deg >= 3 {
        let rhs = apply_macroscopic(&cur, &higher).truncate(deg - 3);
        if rhs.taylor_ref().iter().all(|t| t.is_zero()) {
            break;
        }
        cur = invert_order_two(&rhs, abar)?;
        total = total.add(&cur);
        deg -= 1;
    }
    Ok(total)
}

/// Maps an ā-harmonic `p` to `p′ = p − q` with `−𝒜q = −𝒜p`, so `𝒜p′ = 0` and
/// `p′` agrees with `p` at orders 0, 1 and `m`.
pub fn harmonic_twist(p: &Polynomial, a: &HomogenizedTensorSequence) -> Result<Polynomial> {
    let lap = p.contract_derivatives(a.abar());
    let res = lap.norm();
    if res > HARMONIC_TOL * p.norm().max(1.0) {
        return Err(Error::NotHarmonic(res));
    }
    let ap = apply_macroscopic(p, a).sub(&lap);
    let q = invert_macroscopic(&ap.scale(-1.0), a)?;
    Ok(p.sub(&q).truncate(p.stored_degree()))
}

/// A basis of ā-harmonic polynomials of degree `≤ m`, ordered by degree.
///
/// Within degree `j`, harmonic polynomials come from Cauchy–Kovalevskaya
/// data in the last coordinate: first the degree-`j` monomials in `x′`, then
/// the degree-`j−1` monomials in `x′` times `x_d`, each ordered by
/// enumeration. The ā-harmonic basis is `h(B⁻¹x)` with `B = ā^{1/2}`.
pub fn harmonic_basis(d: usize, m: usize, abar: &SymTensor) -> Result<Vec<Polynomial>> {
    let sub = if is_identity(abar) {
        None
    } else {
        Some(spd_sqrt(abar)?.1)
    };
    let mut lap_prime = SymTensor::identity(d);
    let mut last = vec![0; d];
    last[d - 1] = 2;
    lap_prime.set(&MultiIndex::new(last), 0.0);
    let xd = Polynomial::coordinate(d, d - 1);
    let mut out = Vec::new();
    for j in 0..=m {
        let mut data: Vec<(Polynomial, usize)> = Vec::new();
        for (deg, shift) in [(j, 0usize), (j.wrapping_sub(1), 1)] {
            if deg > j {
                continue;
            }
            for a in multi_indices(d - 1, deg) {
                let mut e = a.entries().to_vec();
                e.push(0);
                data.push((Polynomial::monomial(&MultiIndex::new(e), 1.0), shift));
            }
        }
        for (f, shift) in data {
            let mut h = Polynomial::zero(d);
            let mut u = f;
            let mut k = shift;
            let mut xk = xd.pow(k);
            loop {
                if u.taylor_ref().iter().all(|t| t.is_zero()) {
                    break;
                }
                h = h.add(&u.mul(&xk));
                let next = u
                    .contract_derivatives(&lap_prime)
                    .scale(-1.0 / ((k + 1) * (k + 2)) as f64);
                u = next;
                k += 2;
                xk = xd.pow(k);
            }
            let h = h.truncate(j);
            out.push(match &sub {
                None => h,
                Some(binv) => h.compose_linear(binv),
            });
        }
    }
    Ok(out)
}

/// Physicist Hermite polynomial `h_n` by `h_{n+1} = 2x h_n − 2n h_{n−1}`.
pub fn hermite_poly(n: usize) -> Polynomial {
    let x2 = Polynomial::coordinate(1, 0).scale(2.0);
    let mut prev = Polynomial::constant(1, 1.0);
    if n == 0 {
        return prev;
    }
    let mut cur = x2.clone();
    for k in 1..n {
        let next = x2.mul(&cur).sub(&prev.scale(2.0 * k as f64));
        prev = cur;
        cur = next;
    }
    cur
}

/// `Φ_{t,y}(x) = (4πt)^{−d/2} exp(−|x−y|²/4t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianWeight {
    pub center: Vec<f64>,
    pub t: f64,
}

impl GaussianWeight {
    pub fn new(center: Vec<f64>, t: f64) -> Result<Self> {
        if !(t > 0.0) {
            return Err(Error::InvalidParameter(format!("gaussian time {t} must be positive")));
        }
        Ok(GaussianWeight { center, t })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        let r2: f64 = x.iter().zip(&self.center).map(|(a, b)| (a - b).powi(2)).sum();
        (4.0 * std::f64::consts::PI * self.t).powf(-d / 2.0) * (-r2 / (4.0 * self.t)).exp()
    }
}

fn check_weight(p: &Polynomial, w: &GaussianWeight) -> Result<()> {
    if !(w.t > 0.0) {
        return Err(Error::InvalidParameter(format!("gaussian time {} must be positive", w.t)));
    }
    if w.center.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            found: w.center.len(),
        });
    }
    Ok(())
}

/// `∫ r Φ_{t,y}` from the moments of `N(0, 2t)` in each coordinate.
fn gaussian_mean(r: &Polynomial, w: &GaussianWeight) -> f64 {
    let s = r.translate(&w.center);
    let var = 2.0 * w.t;
    let mut acc = 0.0;
    for k in 0..=s.stored_degree() {
        for (a, c) in multi_indices(s.dim(), k).iter().zip(s.monomials(k)) {
            if c == 0.0 || a.entries().iter().any(|e| e % 2 == 1) {
                continue;
            }
            let moment: f64 = a
                .entries()
                .iter()
                .map(|&e| double_factorial(e.saturating_sub(1)) * var.powi((e / 2) as i32))
                .product();
            acc += c * moment;
        }
    }
    acc
}

fn double_factorial(n: usize) -> f64 {
    let mut r = 1.0;
    let mut k = n;
    while k > 1 {
        r *= k as f64;
        k -= 2;
    }
    r
}

/// `∫_{R^d} p q Φ_{t,y}`, exact up to rounding.
pub fn gaussian_inner(p: &Polynomial, q: &Polynomial, w: &GaussianWeight) -> Result<f64> {
    check_weight(p, w)?;
    check_weight(q, w)?;
    Ok(gaussian_mean(&p.mul(q), w))
}

/// `∫ (|∇(pΦ)|/Φ)² Φ = ∫ |∇p − p (x−y)/(2t)|² Φ`.
pub fn gaussian_gradient_energy(p: &Polynomial, w: &GaussianWeight) -> Result<f64> {
    check_weight(p, w)?;
    let d = p.dim();
    let mut total = 0.0;
    for i in 0..d {
        let shifted = Polynomial::coordinate(d, i).sub(&Polynomial::constant(d, w.center[i]));
        let g = p
            .derivative(&MultiIndex::unit(d, i))
            .sub(&p.mul(&shifted).scale(1.0 / (2.0 * w.t)));
        total += gaussian_mean(&g.mul(&g), w);
    }
    Ok(total)
}

/// Gauss–Legendre nodes and weights on `[−1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `∫_{y + (−s/2, s/2)^d} p² Φ_{t,y}`. The square is expanded in monomials
/// around `y`, so the integral factors into one-dimensional moments
/// `∫_{−s/2}^{s/2} x^k Φ_t(x) dx`, each by Gauss–Legendre quadrature with the
/// order doubled from 16 until successive values agree to `1e−13` of the
/// summed term magnitudes. Returns the value and the last change as an error
/// estimate.
pub fn gaussian_truncated_cube(p: &Polynomial, w: &GaussianWeight, side: f64) -> Result<(f64, f64)> {
    check_weight(p, w)?;
    let d = p.dim();
    let local = p.translate(&w.center);
    let sq = local.mul(&local);
    let deg = sq.stored_degree();
    let half = side / 2.0;
    let norm = (4.0 * std::f64::consts::PI * w.t).powf(-0.5);
    let moments_at = |n: usize| -> Vec<f64> {
        let (gx, gw) = gauss_legendre(n);
        (0..=deg)
            .map(|k| {
                gx.iter()
                    .zip(&gw)
                    .map(|(z, v)| {
                        let x = z * half;
                        v * half * x.powi(k as i32) * norm * (-x * x / (4.0 * w.t)).exp()
                    })
                    .sum()
            })
            .collect()
    };
    let combine = |m: &[f64]| -> (f64, f64) {
        let (mut value, mut scale) = (0.0, 0.0);
        for k in 0..=deg {
            for (a, c) in multi_indices(d, k).iter().zip(sq.monomials(k)) {
                let prod = a.entries().iter().map(|&j| m[j]).product::<f64>();
                value += c * prod;
                scale += (c * prod).abs();
            }
        }
        (value, scale)
    };
    let mut n = 16;
    let mut prev = combine(&moments_at(n)).0;
    loop {
        n *= 2;
        let (cur, scale) = combine(&moments_at(n));
        let change = (cur - prev).abs();
        if change <= 1e-13 * scale || n >= 1024 {
            return Ok((cur, change));
        }
        prev = cur;
    }
}
