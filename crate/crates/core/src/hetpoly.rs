//! Heterogeneous polynomials `ψ = Σ_k ∇^k q : φ^(k)` and their lattice
//! coordinates.
//!
//! A heterogeneous polynomial is sampled on cube grids at the nodes, with the
//! correctors extended periodically; its carrier function is the Q1
//! interpolant of that sample, the same representation the cube solver
//! produces. Cell averages `û(z)` over `z + Q₁` are then exact finite sums.

use std::path::Path;
use std::sync::Arc;

use serde_json::json;

use crate::cell::{corrector_residual, CorrectorHierarchy};
use crate::container::Container;
use crate::cubesolver::{multi_indices_below, BoxIter, CubeSample, MonoEval, SampleLayout};
use crate::error::{Error, Result};
use crate::grid::{flatten, MAX_DIM};
use crate::polynomials::{apply_macroscopic, harmonic_basis, harmonic_twist, invert_macroscopic, Polynomial};
use crate::tensors::{multi_indices, multinomial_f64, SymTensor};

#[derive(Clone, Debug)]
pub struct HetPolynomial {
    pub hierarchy: Arc<CorrectorHierarchy>,
    pub q: Polynomial,
}

impl HetPolynomial {
    pub fn new(hierarchy: Arc<CorrectorHierarchy>, q: Polynomial) -> Result<Self> {
        if q.dim() != hierarchy.dim() {
            return Err(Error::DimensionMismatch {
                expected: hierarchy.dim(),
                found: q.dim(),
            });
        }
        let deg = q.degree();
        if deg > hierarchy.order {
            return Err(Error::OrderExceedsHierarchy {
                requested: deg,
                available: hierarchy.order,
            });
        }
        Ok(HetPolynomial {
            hierarchy,
            q: q.truncate(deg),
        })
    }

    pub fn degree(&self) -> usize {
        self.q.degree()
    }

    pub fn dim(&self) -> usize {
        self.q.dim()
    }

    /// Largest coefficient of `𝒜q`.
    pub fn macroscopic_residual(&self) -> f64 {
        apply_macroscopic(&self.q, &self.hierarchy.abar).max_coeff()
    }

    /// Membership in `A_m^0`.
    pub fn is_harmonic(&self, tol: f64) -> bool {
        self.macroscopic_residual() <= tol * self.q.max_coeff().max(1.0)
    }

    /// The discrete weak-form residual of the corrector equation for `q`.
    pub fn certified_residual(&self) -> Result<f64> {
        corrector_residual(&self.hierarchy, &self.q)
    }

    /// `(weight, ∂^α q, k, component)` for every corrector component.
    fn lift_terms(&self) -> Vec<(f64, MonoEval, usize, usize)> {
        let d = self.dim();
        let mut out = Vec::new();
        for k in 0..=self.degree() {
            for (ai, a) in multi_indices(d, k).iter().enumerate() {
                let dq = self.q.derivative(a);
                if dq.max_coeff() == 0.0 {
                    continue;
                }
                out.push((multinomial_f64(a.entries()), MonoEval::new(&dq), k, ai));
            }
        }
        out
    }

    pub fn add(&self, other: &HetPolynomial) -> Result<HetPolynomial> {
        if self.hierarchy.fingerprint() != other.hierarchy.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: self.hierarchy.fingerprint().to_string(),
                found: other.hierarchy.fingerprint().to_string(),
            });
        }
        HetPolynomial::new(self.hierarchy.clone(), self.q.add(&other.q))
    }

    /// `D^k ψ̂(0)`.
    pub fn intrinsic_differences(&self, k: usize) -> Result<SymTensor> {
        let s = evaluate_het(self, 2 * k + 1)?;
        intrinsic_differences(&s, k)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "kind": "hetpoly",
            "fingerprint": self.hierarchy.fingerprint(),
            "d": self.dim(),
            "degree": self.q.stored_degree(),
        }));
        c.push("q", self.q.to_flat());
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path, hierarchy: Arc<CorrectorHierarchy>) -> Result<Self> {
        let c = Container::load(path)?;
        c.check_fingerprint(hierarchy.fingerprint())?;
        let deg = c.header["degree"]
            .as_u64()
            .ok_or_else(|| Error::Format("header field `degree`".into()))? as usize;
        let q = Polynomial::from_flat(hierarchy.dim(), deg, c.array("q")?)?;
        HetPolynomial::new(hierarchy, q)
    }
}

/// Nodal sample of `ψ` on `Q_R`.
pub fn evaluate_het(psi: &HetPolynomial, r: usize) -> Result<CubeSample> {
    let h = &psi.hierarchy;
    let d = h.dim();
    let n = h.n();
    let mut s = CubeSample::zeros(d, n, r, SampleLayout::Nodal)?;
    let terms = psi.lift_terms();
    let per = s.per_axis();
    let half = (s.intervals() / 2) as i64;
    let mut x = [0.0; MAX_DIM];
    let mut key = [0usize; MAX_DIM];
    for (i, c) in BoxIter::new(d, &[0; MAX_DIM], &[per; MAX_DIM]).enumerate() {
        for k in 0..d {
            x[k] = s.coordinate(c[k]);
            key[k] = (c[k] as i64 - half).rem_euclid(n as i64) as usize;
        }
        let t = flatten(&key, n, d);
        let mut v = 0.0;
        for (w, ev, k, ai) in &terms {
            let phi = if *k == 0 { 1.0 } else { h.phi[*k].component(*ai)[t] };
            if phi != 0.0 {
                v += w * phi * ev.eval(&x[..d]);
            }
        }
        s.values[i] = v;
    }
    Ok(s)
}

/// Cell averages `û(z)` on an integer box of lattice cells.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeFunction {
    pub dim: usize,
    /// Resolution of the carrier grid.
    pub n: usize,
    pub lo: Vec<i64>,
    pub extent: Vec<usize>,
    pub values: Vec<f64>,
}

impl LatticeFunction {
    pub fn from_sample(s: &CubeSample, lo: &[i64], extent: &[usize]) -> Result<Self> {
        let d = s.dim;
        let mut values = Vec::new();
        for c in BoxIter::new(d, &[0; MAX_DIM], extent) {
            let z: Vec<i64> = (0..d).map(|k| lo[k] + c[k] as i64).collect();
            values.push(s.cell_average(&z)?);
        }
        Ok(LatticeFunction {
            dim: d,
            n: s.n,
            lo: lo.to_vec(),
            extent: extent.to_vec(),
            values,
        })
    }

    pub fn get(&self, z: &[i64]) -> Option<f64> {
        let mut idx = 0usize;
        for k in 0..self.dim {
            let off = z[k] - self.lo[k];
            if off < 0 || off as usize >= self.extent[k] {
                return None;
            }
            idx = idx * self.extent[k] + off as usize;
        }
        Some(self.values[idx])
    }

    /// `D^α û(z)` with unit forward shifts.
    pub fn difference(&self, alpha: &[usize], z: &[i64]) -> Option<f64> {
        let a = crate::tensors::MultiIndex::new(alpha.to_vec());
        let m = a.order();
        let mut acc = 0.0;
        for beta in multi_indices_below(&a) {
            let sign = if (m - beta.order()) % 2 == 0 { 1.0 } else { -1.0 };
            let zz: Vec<i64> = (0..self.dim).map(|k| z[k] + beta.entries()[k] as i64).collect();
            acc += sign * a.binomial(&beta) * self.get(&zz)?;
        }
        Some(acc)
    }
}

/// `D^k û(0)` of a sample on `Q_R`, as a symmetric tensor over shifts.
pub fn intrinsic_differences(s: &CubeSample, k: usize) -> Result<SymTensor> {
    let d = s.dim;
    if s.r < 2 * k + 1 {
        return Err(Error::WindowTooSmall(format!(
            "order-{k} intrinsic differences need R ≥ {}, got {}",
            2 * k + 1,
            s.r
        )));
    }
    let lf = LatticeFunction::from_sample(s, &vec![0; d], &vec![k + 1; d])?;
    let zero = vec![0i64; d];
    let mut t = SymTensor::zeros(d, k);
    for a in multi_indices(d, k) {
        let v = lf.difference(a.entries(), &zero).expect("window holds all shifts");
        t.set(&a, v);
    }
    Ok(t)
}

/// The unique `ψ ∈ A_m` with `D^k ψ̂(0) = M^(k)` for `k ≤ m`.
pub fn interpolate_het(h: &Arc<CorrectorHierarchy>, m: &[SymTensor]) -> Result<HetPolynomial> {
    if m.is_empty() {
        return Err(Error::InvalidParameter("no difference data".into()));
    }
    let top = m.len() - 1;
    if top > h.order {
        return Err(Error::OrderExceedsHierarchy {
            requested: top,
            available: h.order,
        });
    }
    let d = h.dim();
    for (k, t) in m.iter().enumerate() {
        if t.order() != k || t.dim() != d {
            return Err(Error::OrderMismatch {
                expected: k,
                found: t.order(),
            });
        }
    }
    let mut q = Polynomial::zero(d);
    for j in (0..=top).rev() {
        let current = if q.max_coeff() == 0.0 {
            SymTensor::zeros(d, j)
        } else {
            let psi = HetPolynomial::new(h.clone(), q.clone())?;
            let s = evaluate_het(&psi, 2 * top + 1)?;
            intrinsic_differences(&s, j)?
        };
        let deficit = m[j].sub(&current)?;
        let mut layers: Vec<SymTensor> = (0..j).map(|k| SymTensor::zeros(d, k)).collect();
        layers.push(deficit);
        q = q.add(&Polynomial::from_taylor(d, layers)?);
    }
    HetPolynomial::new(h.clone(), q)
}

/// Fits `ψ ∈ A_m` by interpolating the intrinsic differences of `u` up to `m`.
pub fn fit_het(h: &Arc<CorrectorHierarchy>, u: &CubeSample, m: usize) -> Result<HetPolynomial> {
    if u.n != h.n() || u.dim != h.dim() {
        return Err(Error::GridMismatch(format!(
            "sample at N = {} vs hierarchy at N = {}",
            u.n,
            h.n()
        )));
    }
    let diffs = (0..=m)
        .map(|k| intrinsic_differences(u, k))
        .collect::<Result<Vec<_>>>()?;
    interpolate_het(h, &diffs)
}

/// A basis of `A_m^0`: twisted ā-harmonic polynomials lifted by the correctors.
pub fn basis_harmonic_het(h: &Arc<CorrectorHierarchy>, m: usize) -> Result<Vec<HetPolynomial>> {
    if m > h.order {
        return Err(Error::OrderExceedsHierarchy {
            requested: m,
            available: h.order,
        });
    }
    harmonic_basis(h.dim(), m, h.abar.abar())?
        .iter()
        .map(|p| HetPolynomial::new(h.clone(), harmonic_twist(p, &h.abar)?))
        .collect()
}

/// `ψ ∈ A_{m+2}` with `−∇·a∇ψ = p`, `ψ̂(0) = 0` and `Dψ̂(0) = 0`, with the
/// certified residual of its polynomial.
pub fn solve_het_rhs(h: &Arc<CorrectorHierarchy>, p: &Polynomial) -> Result<(HetPolynomial, f64)> {
    let d = h.dim();
    if p.max_coeff() == 0.0 {
        return Ok((HetPolynomial::new(h.clone(), Polynomial::zero(d))?, 0.0));
    }
    let m = p.degree();
    if m + 2 > h.order {
        return Err(Error::OrderExceedsHierarchy {
            requested: m + 2,
            available: h.order,
        });
    }
    let q = invert_macroscopic(p, &h.abar)?;
    let psi = HetPolynomial::new(h.clone(), q.clone())?;
    let s = evaluate_het(&psi, 3)?;
    let low = vec![intrinsic_differences(&s, 0)?, intrinsic_differences(&s, 1)?];
    let affine = interpolate_het(h, &low)?;
    let out = HetPolynomial::new(h.clone(), q.sub(&affine.q))?;
    let res = out.certified_residual()?;
    Ok((out, res))
}
