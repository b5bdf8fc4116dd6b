//! Cell problems and the corrector hierarchy.
//!
//! Periodic functions are Q1 finite element functions on the vertices of the
//! unit torus grid (`x = ν h`, `h = 1/N`). A [`PeriodicPolyField`] represents
//! `F(x) = Σ_β f_β(x) x^β` with periodic `f_β` and the monomials kept exact:
//! gradients, fluxes and divergences act on `f_β` through the Q1 element and
//! on `x^β` through the Leibniz rule. The operator commutes with integer
//! translations, which is what makes the induction cancel exactly in the
//! discrete setting.
//!
//! Weak forms are nodal functionals `ℓ(ν) = ⟨·, v_ν⟩`. Their nodal sum is the
//! integral over the torus.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::fields::GridField;
use crate::grid::{flatten, unflatten, TorusOperator, MAX_DIM, Q1};
use crate::krylov::{bicgstab, pcg, project_mean, KrylovStats, System};
use crate::polynomials::{HomogenizedTensorSequence, Polynomial};
use crate::tensors::{
    count, multi_indices, multinomial_f64, MultiIndex, SymTensor, ENUMERATION_VERSION,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOptions {
    /// Relative residual tolerance of the linear solver.
    pub tol: f64,
    /// The iteration cap is `max_iter_factor · N · d`.
    pub max_iter_factor: usize,
    /// Maximal accepted ratio of polynomial to periodic part in the induction.
    pub cancellation_tol: f64,
    /// Accepted `|Σ rhs| / Σ|rhs|` for cell right-hand sides.
    pub mean_tol: f64,
}

impl Default for CellOptions {
    fn default() -> Self {
        CellOptions {
            tol: 1e-10,
            max_iter_factor: 50,
            cancellation_tol: 1e-8,
            mean_tol: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Scalar,
    Vector,
    Tensor(usize),
}

impl Shape {
    pub fn components(&self, d: usize) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vector => d,
            Shape::Tensor(k) => count(d, *k),
        }
    }
}

/// Periodic nodal grid function with scalar, vector or symmetric-tensor values.
/// Component `i` occupies `values[i·N^d .. (i+1)·N^d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TorusGridFunction {
    pub dim: usize,
    pub n: usize,
    pub shape: Shape,
    pub values: Vec<f64>,
}

impl TorusGridFunction {
    pub fn zeros(dim: usize, n: usize, shape: Shape) -> Self {
        let len = shape.components(dim) * n.pow(dim as u32);
        TorusGridFunction {
            dim,
            n,
            shape,
            values: vec![0.0; len],
        }
    }

    pub fn nodes(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn components(&self) -> usize {
        self.shape.components(self.dim)
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let m = self.nodes();
        &self.values[i * m..(i + 1) * m]
    }

    pub fn component_mut(&mut self, i: usize) -> &mut [f64] {
        let m = self.nodes();
        &mut self.values[i * m..(i + 1) * m]
    }

    /// Torus average of component `i`, exact for the Q1 interpolant.
    pub fn mean(&self, i: usize) -> f64 {
        let c = self.component(i);
        c.iter().sum::<f64>() / c.len() as f64
    }

    /// Samples a scalar function at the nodes.
    pub fn from_fn(dim: usize, n: usize, f: impl Fn(&[f64]) -> f64) -> Self {
        let mut out = TorusGridFunction::zeros(dim, n, Shape::Scalar);
        let h = 1.0 / n as f64;
        let mut x = vec![0.0; dim];
        for t in 0..out.nodes() {
            let c = unflatten(t, n, dim);
            for k in 0..dim {
                x[k] = c[k] as f64 * h;
            }
            out.values[t] = f(&x);
        }
        out
    }
}

/// Where the periodic coefficients of a [`PeriodicPolyField`] live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Scalar Q1 nodal values.
    Nodal,
    /// Vectors at the `2^d` Gauss points of every cell.
    Quadrature,
    /// Nodal weak-form functionals.
    Functional,
}

/// `F(x) = Σ_β f_β(x) x^β`.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicPolyField {
    pub dim: usize,
    pub n: usize,
    pub layout: Layout,
    pub terms: BTreeMap<MultiIndex, Vec<f64>>,
}

pub enum LeibnizOp<'a> {
    Gradient,
    Flux(&'a GridField),
    Divergence,
    MultiplyPolynomial(&'a Polynomial),
}

impl PeriodicPolyField {
    pub fn new(dim: usize, n: usize, layout: Layout) -> Self {
        PeriodicPolyField {
            dim,
            n,
            layout,
            terms: BTreeMap::new(),
        }
    }

    fn term_len(&self) -> usize {
        let nodes = self.n.pow(self.dim as u32);
        match self.layout {
            Layout::Nodal | Layout::Functional => nodes,
            Layout::Quadrature => nodes * (1 << self.dim) * self.dim,
        }
    }

    /// Adds `s · f` to the coefficient of `x^β`.
    pub fn add_term(&mut self, beta: MultiIndex, s: f64, f: &[f64]) {
        let len = self.term_len();
        debug_assert_eq!(f.len(), len);
        let e = self.terms.entry(beta).or_insert_with(|| vec![0.0; len]);
        for (a, b) in e.iter_mut().zip(f) {
            *a += s * b;
        }
    }

    pub fn add(&self, other: &PeriodicPolyField) -> Result<PeriodicPolyField> {
        if self.dim != other.dim || self.n != other.n || self.layout != other.layout {
            return Err(Error::GridMismatch("fields on different grids".into()));
        }
        let mut out = self.clone();
        for (b, f) in &other.terms {
            out.add_term(b.clone(), 1.0, f);
        }
        Ok(out)
    }

    /// The `β = 0` coefficient, or zeros.
    pub fn periodic_part(&self) -> Vec<f64> {
        self.terms
            .get(&MultiIndex::zero(self.dim))
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.term_len()])
    }

    /// Density L² norm `sqrt(Σ_ν ℓ(ν)² / h^d)` of one functional coefficient.
    fn functional_norm(&self, f: &[f64]) -> f64 {
        let hd = (1.0 / self.n as f64).powi(self.dim as i32);
        (f.iter().map(|v| v * v).sum::<f64>() / hd).sqrt()
    }

    /// Norms of the `β = 0` part and of all other parts together.
    pub fn split_norms(&self) -> (f64, f64) {
        let zero = MultiIndex::zero(self.dim);
        let mut per = 0.0;
        let mut poly = 0.0f64;
        for (b, f) in &self.terms {
            let v = match self.layout {
                Layout::Functional => self.functional_norm(f),
                _ => f.iter().map(|x| x * x).sum::<f64>().sqrt(),
            };
            if *b == zero {
                per = v;
            } else {
                poly = poly.hypot(v);
            }
        }
        (per, poly)
    }
}

/// Cell-to-vertex table, `verts[c * 2^d + e]`.
fn cell_vertices(n: usize, d: usize) -> Vec<usize> {
    let nv = 1 << d;
    let cells = n.pow(d as u32);
    let mut out = vec![0usize; cells * nv];
    for c in 0..cells {
        let cc = unflatten(c, n, d);
        for e in 0..nv {
            let mut v = [0usize; MAX_DIM];
            for k in 0..d {
                v[k] = (cc[k] + ((e >> k) & 1)) % n;
            }
            out[c * nv + e] = flatten(&v, n, d);
        }
    }
    out
}

fn minus_unit(beta: &MultiIndex, i: usize) -> Option<MultiIndex> {
    beta.checked_sub(&MultiIndex::unit(beta.dim(), i))
}

/// Exact Leibniz expansion of one operation.
pub fn leibniz_expand(f: &PeriodicPolyField, op: LeibnizOp) -> Result<PeriodicPolyField> {
    let d = f.dim;
    let n = f.n;
    let nv = 1 << d;
    let cells = n.pow(d as u32);
    let h = 1.0 / n as f64;
    match op {
        LeibnizOp::Gradient => {
            if f.layout != Layout::Nodal {
                return Err(Error::GridMismatch("gradient needs nodal coefficients".into()));
            }
            let q = Q1::new(d);
            let verts = cell_vertices(n, d);
            let mut out = PeriodicPolyField::new(d, n, Layout::Quadrature);
            let len = cells * nv * d;
            for (beta, vals) in &f.terms {
                let mut grad = vec![0.0; len];
                let mut interp = vec![0.0; cells * nv];
                for c in 0..cells {
                    let vs = &verts[c * nv..(c + 1) * nv];
                    for g in 0..nv {
                        let mut iv = 0.0;
                        for (e, &v) in vs.iter().enumerate() {
                            let x = vals[v];
                            iv += q.val[g * nv + e] * x;
                            for k in 0..d {
                                grad[(c * nv + g) * d + k] += q.grad[(g * nv + e) * d + k] / h * x;
                            }
                        }
                        interp[c * nv + g] = iv;
                    }
                }
                out.add_term(beta.clone(), 1.0, &grad);
                for i in 0..d {
                    if let Some(b2) = minus_unit(beta, i) {
                        let bi = beta.entries()[i] as f64;
                        let mut s = vec![0.0; len];
                        for (cg, iv) in interp.iter().enumerate() {
                            s[cg * d + i] = bi * iv;
                        }
                        out.add_term(b2, 1.0, &s);
                    }
                }
            }
            Ok(out)
        }
        LeibnizOp::Flux(field) => {
            if f.layout != Layout::Quadrature {
                return Err(Error::GridMismatch("flux needs quadrature vectors".into()));
            }
            if field.dim != d || field.n != n {
                return Err(Error::GridMismatch(format!(
                    "field grid {}^{} vs {}^{}",
                    field.n, field.dim, n, d
                )));
            }
            let mut out = PeriodicPolyField::new(d, n, Layout::Quadrature);
            for (beta, vals) in &f.terms {
                let mut s = vec![0.0; vals.len()];
                for c in 0..cells {
                    let a = field.cell(c);
                    for g in 0..nv {
                        let base = (c * nv + g) * d;
                        for k in 0..d {
                            let mut acc = 0.0;
                            for l in 0..d {
                                acc += a[k * d + l] * vals[base + l];
                            }
                            s[base + k] = acc;
                        }
                    }
                }
                out.terms.insert(beta.clone(), s);
            }
            Ok(out)
        }
        LeibnizOp::Divergence => {
            if f.layout != Layout::Quadrature {
                return Err(Error::GridMismatch("divergence needs quadrature vectors".into()));
            }
            let q = Q1::new(d);
            let verts = cell_vertices(n, d);
            let w = h.powi(d as i32) / nv as f64;
            let nodes = cells;
            let mut out = PeriodicPolyField::new(d, n, Layout::Functional);
            for (beta, vals) in &f.terms {
                let mut div = vec![0.0; nodes];
                for c in 0..cells {
                    let vs = &verts[c * nv..(c + 1) * nv];
                    for (e, &v) in vs.iter().enumerate() {
                        let mut acc = 0.0;
                        for g in 0..nv {
                            let base = (c * nv + g) * d;
                            for k in 0..d {
                                acc += q.grad[(g * nv + e) * d + k] / h * vals[base + k];
                            }
                        }
                        div[v] -= w * acc;
                    }
                }
                out.add_term(beta.clone(), 1.0, &div);
                for i in 0..d {
                    if let Some(b2) = minus_unit(beta, i) {
                        let bi = beta.entries()[i] as f64;
                        let mut mass = vec![0.0; nodes];
                        for c in 0..cells {
                            let vs = &verts[c * nv..(c + 1) * nv];
                            for (e, &v) in vs.iter().enumerate() {
                                let mut acc = 0.0;
                                for g in 0..nv {
                                    acc += q.val[g * nv + e] * vals[(c * nv + g) * d + i];
                                }
                                mass[v] += w * bi * acc;
                            }
                        }
                        out.add_term(b2, 1.0, &mass);
                    }
                }
            }
            Ok(out)
        }
        LeibnizOp::MultiplyPolynomial(p) => {
            if p.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: p.dim(),
                });
            }
            let mut out = PeriodicPolyField::new(d, n, f.layout);
            for k in 0..=p.stored_degree() {
                for (a, c) in multi_indices(d, k).into_iter().zip(p.monomials(k)) {
                    if c == 0.0 {
                        continue;
                    }
                    for (beta, vals) in &f.terms {
                        out.add_term(beta.add(&a), c, vals);
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Weak form of a polynomial with constant coefficients: `c_γ h^d` at every node.
fn weak_polynomial(p: &Polynomial, n: usize) -> PeriodicPolyField {
    let d = p.dim();
    let nodes = n.pow(d as u32);
    let hd = (1.0 / n as f64).powi(d as i32);
    let mut out = PeriodicPolyField::new(d, n, Layout::Functional);
    let ones = vec![hd; nodes];
    for k in 0..=p.stored_degree() {
        for (a, c) in multi_indices(d, k).into_iter().zip(p.monomials(k)) {
            if c != 0.0 {
                out.add_term(a, c, &ones);
            }
        }
    }
    out
}

/// The assembled torus operator with its Krylov solver.
pub struct CellSolver {
    op: TorusOperator,
    inv_diag: Vec<f64>,
    symmetric: bool,
    n: usize,
    d: usize,
    opts: CellOptions,
}

impl CellSolver {
    pub fn new(field: &GridField, opts: CellOptions) -> Self {
        let op = TorusOperator::new(field, &Q1::new(field.dim));
        let inv_diag = op.diag().iter().map(|v| 1.0 / v).collect();
        CellSolver {
            op,
            inv_diag,
            symmetric: field.symmetric,
            n: field.n,
            d: field.dim,
            opts,
        }
    }

    pub fn max_iter(&self) -> usize {
        self.opts.max_iter_factor * self.n * self.d
    }

    /// `y = K x`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.op.apply(x, y);
    }

    /// Solves `K u = b` for zero-mean `u`; `b` must have zero sum.
    pub fn solve(&self, b: &[f64]) -> Result<(Vec<f64>, KrylovStats)> {
        let total: f64 = b.iter().sum();
        let scale: f64 = b.iter().map(|v| v.abs()).sum();
        if total.abs() > self.opts.mean_tol * scale.max(f64::MIN_POSITIVE) && scale > 0.0 {
            return Err(Error::NonZeroMean {
                mean: total,
                tol: self.opts.mean_tol * scale,
            });
        }
        self.solve_projected(b)
    }

    /// Solves `K u = b − mean(b)` without checking the mean.
    pub fn solve_projected(&self, b: &[f64]) -> Result<(Vec<f64>, KrylovStats)> {
        let mut b = b.to_vec();
        project_mean(&mut b);
        let apply = |x: &[f64], y: &mut [f64]| self.op.apply(x, y);
        let pre = |r: &[f64], z: &mut [f64]| {
            for ((z, r), s) in z.iter_mut().zip(r).zip(&self.inv_diag) {
                *z = r * s;
            }
        };
        let proj = |x: &mut [f64]| project_mean(x);
        let sys = System {
            apply: &apply,
            precond: &pre,
            project: Some(&proj),
        };
        let mut x = vec![0.0; b.len()];
        let stats = if self.symmetric {
            pcg(&sys, &b, &mut x, self.opts.tol, self.max_iter())
        } else {
            bicgstab(&sys, &b, &mut x, self.opts.tol, self.max_iter())
        };
        if !stats.converged {
            return Err(Error::NotConverged {
                iterations: stats.iterations,
                residual: stats.residual,
            });
        }
        Ok((x, stats))
    }
}

/// Right-hand side of a cell problem `∇·(a∇u) = rhs`.
pub enum CellRhs<'a> {
    /// Nodal samples of a density, weak-formed with the Q1 mass matrix.
    Density(&'a TorusGridFunction),
    /// A weak-form functional `ℓ(ν) = ⟨rhs, v_ν⟩`.
    Functional(&'a [f64]),
}

/// Q1 mass-matrix weak form `ℓ(ν) = ∫ f v_ν` of nodal values.
pub fn weak_density(f: &[f64], n: usize, d: usize) -> Vec<f64> {
    let q = Q1::new(d);
    let nv = q.nv;
    let verts = cell_vertices(n, d);
    let w = (1.0 / n as f64).powi(d as i32) / nv as f64;
    let mut out = vec![0.0; f.len()];
    for c in 0..f.len() {
        let vs = &verts[c * nv..(c + 1) * nv];
        for g in 0..nv {
            let fg: f64 = vs.iter().enumerate().map(|(e, &v)| q.val[g * nv + e] * f[v]).sum();
            for (e, &v) in vs.iter().enumerate() {
                out[v] += w * q.val[g * nv + e] * fg;
            }
        }
    }
    out
}

/// Solves `∇·(a∇u) = rhs` on the torus for zero-mean `u`.
pub fn solve_cell(
    g: &GridField,
    rhs: &CellRhs,
    opts: CellOptions,
) -> Result<(TorusGridFunction, KrylovStats)> {
    let ell = match rhs {
        CellRhs::Density(f) => {
            if f.dim != g.dim || f.n != g.n || f.shape != Shape::Scalar {
                return Err(Error::GridMismatch("density does not match the field grid".into()));
            }
            weak_density(&f.values, g.n, g.dim)
        }
        CellRhs::Functional(l) => {
            if l.len() != g.cells() {
                return Err(Error::GridMismatch("functional length".into()));
            }
            l.to_vec()
        }
    };
    let b: Vec<f64> = ell.iter().map(|v| -v).collect();
    let solver = CellSolver::new(g, opts);
    let (u, stats) = solver.solve(&b)?;
    Ok((
        TorusGridFunction {
            dim: g.dim,
            n: g.n,
            shape: Shape::Scalar,
            values: u,
        },
        stats,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub order: usize,
    pub component: String,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CancellationRecord {
    pub order: usize,
    pub component: String,
    pub periodic_norm: f64,
    pub polynomial_norm: f64,
    /// `polynomial_norm / max(periodic_norm, Λ_est)`.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyMeta {
    pub options: CellOptions,
    pub differentiation: String,
    pub solves: Vec<SolveRecord>,
    pub cancellation: Vec<CancellationRecord>,
    /// `|ā^(2) − sym⟨a(I + ∇φ^(1))⟩|` (max entry).
    pub abar_cross_check: f64,
}

#[derive(Clone, Debug)]
pub struct CorrectorHierarchy {
    pub field: GridField,
    pub order: usize,
    /// `φ^(0) ≡ 1, φ^(1), …, φ^(M)`.
    pub phi: Vec<TorusGridFunction>,
    /// `ā^(2), …, ā^(max(M,2))`.
    pub abar: HomogenizedTensorSequence,
    pub meta: HierarchyMeta,
}

/// `ψ_n[q] = Σ_{k ≤ n} φ^(k) : ∇^k q` as a nodal [`PeriodicPolyField`].
fn psi_field(phi: &[TorusGridFunction], q: &Polynomial, n: usize) -> PeriodicPolyField {
    let d = q.dim();
    let nn = phi[0].n;
    let mut out = PeriodicPolyField::new(d, nn, Layout::Nodal);
    for (k, ph) in phi.iter().enumerate().take(n + 1) {
        for (ai, a) in multi_indices(d, k).iter().enumerate() {
            let dq = q.derivative(a);
            let w = multinomial_f64(a.entries());
            for j in 0..=dq.stored_degree() {
                for (g, c) in multi_indices(d, j).into_iter().zip(dq.monomials(j)) {
                    if c != 0.0 {
                        out.add_term(g, w * c, ph.component(ai));
                    }
                }
            }
        }
    }
    out
}

/// `∇·a∇ψ_n[q] − Σ_{k=2}^{n} ā^(k):∇^k q` in weak form.
fn residual_field(
    field: &GridField,
    phi: &[TorusGridFunction],
    abar: &[SymTensor],
    q: &Polynomial,
    n: usize,
) -> Result<PeriodicPolyField> {
    let psi = psi_field(phi, q, n);
    let g = leibniz_expand(&psi, LeibnizOp::Gradient)?;
    let fl = leibniz_expand(&g, LeibnizOp::Flux(field))?;
    let div = leibniz_expand(&fl, LeibnizOp::Divergence)?;
    let mut macro_part = Polynomial::zero(q.dim());
    for t in abar.iter().filter(|t| t.order() <= n) {
        macro_part = macro_part.add(&q.contract_derivatives(t));
    }
    let weak = weak_polynomial(&macro_part.scale(-1.0), field.n);
    div.add(&weak)
}

/// `x^β / β!`.
fn scaled_monomial(beta: &MultiIndex) -> Polynomial {
    Polynomial::monomial(beta, 1.0 / beta.factorial())
}

/// Builds `φ^(1..M)` and `ā^(2..max(M,2))` by induction on the order.
pub fn build_hierarchy(g: &GridField, m_max: usize, opts: CellOptions) -> Result<CorrectorHierarchy> {
    if m_max == 0 {
        return Err(Error::InvalidParameter("hierarchy order must be at least 1".into()));
    }
    let d = g.dim;
    let n = g.n;
    let nodes = g.cells();
    let hd = g.h().powi(d as i32);
    let solver = CellSolver::new(g, opts);
    let mut phi = vec![TorusGridFunction {
        dim: d,
        n,
        shape: Shape::Tensor(0),
        values: vec![1.0; nodes],
    }];
    let mut abar: Vec<SymTensor> = Vec::new();
    let mut solves = Vec::new();
    let mut cancellation = Vec::new();
    let floor = g.lambda_max;
    for m in 1..=m_max.max(2) {
        let betas = multi_indices(d, m);
        let results: Vec<Result<(f64, Option<(Vec<f64>, KrylovStats)>, (f64, f64))>> = betas
            .par_iter()
            .map(|beta| {
                let l = residual_field(g, &phi, &abar, &scaled_monomial(beta), m - 1)?;
                let norms = l.split_norms();
                let f0 = l.periodic_part();
                let mean: f64 = f0.iter().sum();
                let weight = multinomial_f64(beta.entries());
                let sol = if m <= m_max {
                    let b: Vec<f64> = f0.iter().map(|v| v - hd * mean).collect();
                    let (u, st) = solver.solve_projected(&b)?;
                    Some((u.iter().map(|v| v / weight).collect(), st))
                } else {
                    None
                };
                Ok((mean / weight, sol, norms))
            })
            .collect();
        let mut tensor = SymTensor::zeros(d, m);
        let mut phim = TorusGridFunction::zeros(d, n, Shape::Tensor(m));
        for (i, (beta, r)) in betas.iter().zip(results).enumerate() {
            let (mean, sol, (per, poly)) = r?;
            let ratio = poly / per.max(floor);
            cancellation.push(CancellationRecord {
                order: m,
                component: beta.to_string(),
                periodic_norm: per,
                polynomial_norm: poly,
                ratio,
            });
            if ratio > opts.cancellation_tol {
                return Err(Error::Cancellation { order: m, ratio });
            }
            tensor.set(beta, mean);
            if let Some((u, st)) = sol {
                phim.component_mut(i).copy_from_slice(&u);
                solves.push(SolveRecord {
                    order: m,
                    component: beta.to_string(),
                    iterations: st.iterations,
                    residual: st.residual,
                });
            }
        }
        if m >= 2 {
            abar.push(tensor);
        }
        if m <= m_max {
            phi.push(phim);
        }
    }
    let seq = HomogenizedTensorSequence::new(d, abar)?;
    let mut h = CorrectorHierarchy {
        field: g.clone(),
        order: m_max,
        phi,
        abar: seq,
        meta: HierarchyMeta {
            options: opts,
            differentiation: "q1-gauss2".into(),
            solves,
            cancellation,
            abar_cross_check: 0.0,
        },
    };
    let direct = homogenized_matrix(&h)?;
    h.meta.abar_cross_check = direct.sub(h.abar.abar())?.max_abs();
    Ok(h)
}

/// `sym⟨a(I_d + ∇φ^(1))⟩` by Gauss quadrature.
pub fn homogenized_matrix(h: &CorrectorHierarchy) -> Result<SymTensor> {
    if h.order < 1 {
        return Err(Error::OrderExceedsHierarchy {
            requested: 1,
            available: h.order,
        });
    }
    let g = &h.field;
    let d = g.dim;
    let n = g.n;
    let mut mat = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut f = PeriodicPolyField::new(d, n, Layout::Nodal);
        f.add_term(MultiIndex::zero(d), 1.0, h.phi[1].component(j));
        let grad = leibniz_expand(&f, LeibnizOp::Gradient)?;
        let flux = leibniz_expand(&grad, LeibnizOp::Flux(g))?;
        let s = flux.periodic_part();
        let nv = 1 << d;
        let w = g.h().powi(d as i32) / nv as f64;
        let mut col = vec![0.0; d];
        for c in 0..g.cells() {
            let a = g.cell(c);
            for gp in 0..nv {
                for i in 0..d {
                    col[i] += w * (s[(c * nv + gp) * d + i] + a[i * d + j]);
                }
            }
        }
        for i in 0..d {
            mat[i][j] = col[i];
        }
    }
    Ok(SymTensor::from_matrix(&mat))
}

/// Discrete weak-form norm of `∇·a∇ψ_n[p] − Σ_{k=2}^{n} ā^(k):∇^k p`, with
/// `n = deg p`, divided by `|p| = sqrt(Σ_k |∇^k p(0)|²)`.
pub fn corrector_residual(h: &CorrectorHierarchy, p: &Polynomial) -> Result<f64> {
    let n = p.degree();
    if n > h.order {
        return Err(Error::OrderExceedsHierarchy {
            requested: n,
            available: h.order,
        });
    }
    let scale = p.norm();
    if scale == 0.0 {
        return Ok(0.0);
    }
    let l = residual_field(&h.field, &h.phi, h.abar.tensors(), p, n)?;
    let (per, poly) = l.split_norms();
    Ok(per.hypot(poly) / scale)
}

impl CorrectorHierarchy {
    pub fn fingerprint(&self) -> &str {
        &self.field.fingerprint
    }

    pub fn dim(&self) -> usize {
        self.field.dim
    }

    pub fn n(&self) -> usize {
        self.field.n
    }

    /// `‖∇φ^(k)‖_{L²(Q₁)}` with the tensor norm on the corrector index.
    pub fn gradient_norm(&self, k: usize) -> f64 {
        let d = self.dim();
        let n = self.n();
        let nv = 1 << d;
        let w = self.field.h().powi(d as i32) / nv as f64;
        let mut total = 0.0;
        for (ai, a) in multi_indices(d, k).iter().enumerate() {
            let mut f = PeriodicPolyField::new(d, n, Layout::Nodal);
            f.add_term(MultiIndex::zero(d), 1.0, self.phi[k].component(ai));
            let g = leibniz_expand(&f, LeibnizOp::Gradient).expect("nodal layout");
            let s = g.periodic_part();
            total += multinomial_f64(a.entries()) * w * s.iter().map(|v| v * v).sum::<f64>();
        }
        total.sqrt()
    }

    /// `‖φ^(k)‖_{L²(Q₁)}` with the tensor norm on the corrector index.
    pub fn corrector_norm(&self, k: usize) -> f64 {
        let d = self.dim();
        let mut total = 0.0;
        for (ai, a) in multi_indices(d, k).iter().enumerate() {
            let c = self.phi[k].component(ai);
            let m = weak_density(c, self.n(), d);
            total += multinomial_f64(a.entries()) * c.iter().zip(&m).map(|(x, y)| x * y).sum::<f64>();
        }
        total.max(0.0).sqrt()
    }

    pub fn to_container(&self) -> Result<Container> {
        let header = json!({
            "kind": "hierarchy",
            "fingerprint": self.field.fingerprint,
            "d": self.dim(),
            "N": self.n(),
            "M": self.order,
            "tolerances": {
                "solver": self.meta.options.tol,
                "cancellation": self.meta.options.cancellation_tol,
                "mean": self.meta.options.mean_tol,
            },
            "enumeration_version": ENUMERATION_VERSION,
            "meta": serde_json::to_value(&self.meta)?,
            "field_label": self.field.label,
        });
        let mut c = Container::new(header);
        for (k, p) in self.phi.iter().enumerate().skip(1) {
            c.push(format!("phi/{k}"), p.values.clone());
        }
        for t in self.abar.tensors() {
            c.push(format!("abar/{}", t.order()), t.coeffs().to_vec());
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    /// Reloads a hierarchy, checking that it was built for `field`.
    pub fn from_container(c: &Container, field: &GridField) -> Result<Self> {
        c.check_fingerprint(&field.fingerprint)?;
        let hv = &c.header;
        let get = |k: &str| {
            hv[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("header field `{k}`")))
        };
        let (d, n, m) = (get("d")?, get("N")?, get("M")?);
        if d != field.dim || n != field.n {
            return Err(Error::GridMismatch("cached hierarchy grid".into()));
        }
        let ev = hv["enumeration_version"].as_u64().unwrap_or(0) as u32;
        if ev != ENUMERATION_VERSION {
            return Err(Error::VersionMismatch {
                expected: ENUMERATION_VERSION,
                found: ev,
            });
        }
        let meta: HierarchyMeta = serde_json::from_value(hv["meta"].clone())?;
        let mut phi = vec![TorusGridFunction {
            dim: d,
            n,
            shape: Shape::Tensor(0),
            values: vec![1.0; field.cells()],
        }];
        for k in 1..=m {
            let v = c.array(&format!("phi/{k}"))?;
            let expected = count(d, k) * field.cells();
            if v.len() != expected {
                return Err(Error::Truncated {
                    expected,
                    found: v.len(),
                });
            }
            phi.push(TorusGridFunction {
                dim: d,
                n,
                shape: Shape::Tensor(k),
                values: v.to_vec(),
            });
        }
        let mut tensors = Vec::new();
        for k in 2..=m.max(2) {
            tensors.push(SymTensor::from_coeffs(d, k, c.array(&format!("abar/{k}"))?.to_vec())?);
        }
        Ok(CorrectorHierarchy {
            field: field.clone(),
            order: m,
            phi,
            abar: HomogenizedTensorSequence::new(d, tensors)?,
            meta,
        })
    }

    pub fn load(path: &Path, field: &GridField) -> Result<Self> {
        CorrectorHierarchy::from_container(&Container::load(path)?, field)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{gallery_field, sample_field};
    use serde_json::json;

    fn field(name: &str, d: usize, n: usize, params: serde_json::Value) -> GridField {
        sample_field(&gallery_field(name, d, &params).unwrap(), n).unwrap()
    }

    #[test]
    fn solve_cell_sine_oracle() {
        // u″ = sin 2πx has u = −sin(2πx)/(4π²)
        let g = field("constant", 1, 128, json!({}));
        let f = TorusGridFunction::from_fn(1, 128, |x| (2.0 * std::f64::consts::PI * x[0]).sin());
        let (u, st) = solve_cell(&g, &CellRhs::Density(&f), CellOptions::default()).unwrap();
        assert!(st.converged);
        let c = 4.0 * std::f64::consts::PI.powi(2);
        let err = u
            .values
            .iter()
            .zip(&f.values)
            .map(|(a, s)| (a + s / c).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-5, "{err}");
        // O(N⁻²): halving h divides the error by about four
        let g2 = field("constant", 1, 64, json!({}));
        let f2 = TorusGridFunction::from_fn(1, 64, |x| (2.0 * std::f64::consts::PI * x[0]).sin());
        let (u2, _) = solve_cell(&g2, &CellRhs::Density(&f2), CellOptions::default()).unwrap();
        let err2 = u2
            .values
            .iter()
            .zip(&f2.values)
            .map(|(a, s)| (a + s / c).abs())
            .fold(0.0, f64::max);
        assert!((err2 / err - 4.0).abs() < 0.2);
    }

    #[test]
    fn solve_cell_zero_rhs() {
        let g = field("trig2d", 2, 8, json!({}));
        let zero = vec![0.0; g.cells()];
        let (u, _) = solve_cell(&g, &CellRhs::Functional(&zero), CellOptions::default()).unwrap();
        assert!(u.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn solve_cell_rejects_nonzero_mean() {
        let g = field("constant", 1, 16, json!({}));
        let f = TorusGridFunction::from_fn(1, 16, |_| 1.0);
        assert!(matches!(
            solve_cell(&g, &CellRhs::Density(&f), CellOptions::default()),
            Err(Error::NonZeroMean { .. })
        ));
    }

    #[test]
    fn first_corrector_one_dimensional_oracle() {
        // a(1 + φ′) is constant, equal to the harmonic mean
        let g = field("laminate1d", 1, 128, json!({}));
        let h = build_hierarchy(&g, 1, CellOptions::default()).unwrap();
        let abar = h.abar.abar().coeffs()[0];
        let phi = h.phi[1].component(0);
        for c in 0..128 {
            let dphi = (phi[(c + 1) % 128] - phi[c]) * 128.0;
            let a = g.cell(c)[0];
            assert!((a * (1.0 + dphi) - abar).abs() < 1e-8);
        }
        assert!((abar - 3f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn leibniz_examples() {
        let (d, n) = (2, 4);
        let f = TorusGridFunction::from_fn(d, n, |x| (2.0 * std::f64::consts::PI * x[0]).cos());
        let mut ppf = PeriodicPolyField::new(d, n, Layout::Nodal);
        ppf.add_term(MultiIndex::zero(d), 1.0, &f.values);
        let g = leibniz_expand(&ppf, LeibnizOp::Gradient).unwrap();
        assert_eq!(g.terms.len(), 1);
        assert!(g.terms.contains_key(&MultiIndex::zero(d)));

        let x1 = Polynomial::coordinate(d, 0);
        let m = leibniz_expand(&ppf, LeibnizOp::MultiplyPolynomial(&x1)).unwrap();
        assert_eq!(m.terms.keys().cloned().collect::<Vec<_>>(), vec![MultiIndex::unit(d, 0)]);
        assert_eq!(m.terms[&MultiIndex::unit(d, 0)], f.values);

        let mut lin = PeriodicPolyField::new(d, n, Layout::Nodal);
        lin.add_term(MultiIndex::unit(d, 0), 1.0, &vec![1.0; n * n]);
        let g = leibniz_expand(&lin, LeibnizOp::Gradient).unwrap();
        let div = leibniz_expand(&g, LeibnizOp::Divergence).unwrap();
        for v in div.terms.values() {
            assert!(v.iter().all(|x| x.abs() < 1e-14));
        }
        assert!(leibniz_expand(&lin, LeibnizOp::Divergence).is_err());
    }

    #[test]
    fn constant_field_hierarchy_degenerates() {
        let a = json!({"matrix": [[2.0, 0.5], [0.5, 1.5]]});
        let g = field("constant", 2, 16, a);
        let h = build_hierarchy(&g, 4, CellOptions::default()).unwrap();
        for k in 1..=4 {
            assert!(h.corrector_norm(k) < 1e-12);
        }
        let expected = SymTensor::from_matrix(&[vec![2.0, 0.5], vec![0.5, 1.5]]);
        assert!(h.abar.abar().sub(&expected).unwrap().max_abs() < 1e-12);
        for k in 3..=4 {
            assert!(h.abar.get(k).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn laminate_homogenized_matrix() {
        let g = field("laminate1d", 2, 64, json!({"axis": 1}));
        let h = build_hierarchy(&g, 2, CellOptions::default()).unwrap();
        let m = h.abar.abar().to_matrix();
        assert!((m[0][0] - 3f64.sqrt()).abs() < 1e-6);
        assert!((m[1][1] - 2.0).abs() < 1e-12);
        assert!(m[0][1].abs() < 1e-12);
        assert!(h.meta.abar_cross_check < 1e-9);
    }

    #[test]
    fn induction_cancels_for_trig_field() {
        let g = field("trig2d", 2, 16, json!({}));
        let h = build_hierarchy(&g, 4, CellOptions::default()).unwrap();
        for r in &h.meta.cancellation {
            assert!(r.ratio < 1e-8, "{r:?}");
        }
        for k in 1..=4 {
            for i in 0..h.phi[k].components() {
                assert!(h.phi[k].mean(i).abs() < 1e-9);
            }
        }
        let p = Polynomial::monomial(&MultiIndex::new(vec![2, 1]), 1.0);
        assert!(corrector_residual(&h, &p).unwrap() < 1e-8);
        let big = Polynomial::monomial(&MultiIndex::new(vec![3, 2]), 1.0);
        assert!(matches!(
            corrector_residual(&h, &big),
            Err(Error::OrderExceedsHierarchy { .. })
        ));
    }

    #[test]
    fn nonsymmetric_field_builds() {
        let g = field("rotating", 2, 16, json!({}));
        let h = build_hierarchy(&g, 3, CellOptions::default()).unwrap();
        let (lmin, lmax) = (g.lambda_min, g.lambda_max);
        let m = h.abar.abar().to_matrix();
        let eig = nalgebra::SymmetricEigen::new(nalgebra::Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1]));
        assert!(eig.eigenvalues.min() >= lmin - 1e-6);
        assert!(eig.eigenvalues.max() <= lmax + 1e-6);
        for r in &h.meta.cancellation {
            assert!(r.ratio < 1e-8, "{r:?}");
        }
    }

    #[test]
    fn hierarchy_round_trip() {
        let g = field("trig2d", 2, 8, json!({}));
        let h = build_hierarchy(&g, 2, CellOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.bin");
        h.save(&path).unwrap();
        let back = CorrectorHierarchy::load(&path, &g).unwrap();
        for (a, b) in h.phi.iter().zip(&back.phi) {
            assert_eq!(a.values, b.values);
        }
        assert_eq!(back.abar, h.abar);
        let other = field("trig2d", 2, 8, json!({"amplitude": 0.5}));
        assert!(matches!(
            CorrectorHierarchy::load(&path, &other),
            Err(Error::FingerprintMismatch { .. })
        ));
    }
}
