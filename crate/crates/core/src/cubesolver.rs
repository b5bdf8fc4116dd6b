//! Dirichlet problems on the cube `Q_R = (−R/2, R/2)^d` with the coefficient
//! tiled periodically.
//!
//! The cube carries the same Q1 discretization as the torus, with `R·N`
//! intervals per axis and nodes at `x_j = (j − RN/2) h`. The node `j` sees the
//! periodic stencil of key `(j − RN/2) mod N`. Solves use Krylov iterations
//! with a geometric multigrid preconditioner whose coarse operators are
//! Galerkin products `PᵀAP`; these inherit the periodic structure, so every
//! level stores one stencil per key rather than per node.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::fields::GridField;
use crate::grid::{element_matrices, n_offsets, offset, PeriodicStencil, MAX_DIM, Q1};
use crate::krylov::{bicgstab, dot, pcg, KrylovStats, System};
use crate::polynomials::Polynomial;
use crate::tensors::{multi_indices, multinomial_f64, MultiIndex, SymTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleLayout {
    /// `(RN+1)^d` vertex values of a Q1 function.
    Nodal,
    /// `(RN)^d` fine-cell values of a piecewise constant function.
    Cells,
}

/// A grid function on `Q_R`, row-major with the last coordinate fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeSample {
    pub dim: usize,
    pub n: usize,
    pub r: usize,
    pub layout: SampleLayout,
    pub values: Vec<f64>,
}

/// Odometer over the box `lo ≤ i < hi` (row-major).
pub(crate) struct BoxIter {
    d: usize,
    lo: [usize; MAX_DIM],
    hi: [usize; MAX_DIM],
    cur: [usize; MAX_DIM],
    done: bool,
}

impl BoxIter {
    pub fn new(d: usize, lo: &[usize], hi: &[usize]) -> Self {
        let mut b = BoxIter {
            d,
            lo: [0; MAX_DIM],
            hi: [0; MAX_DIM],
            cur: [0; MAX_DIM],
            done: false,
        };
        for k in 0..d {
            b.lo[k] = lo[k];
            b.hi[k] = hi[k];
            b.cur[k] = lo[k];
            if lo[k] >= hi[k] {
                b.done = true;
            }
        }
        b
    }
}

impl Iterator for BoxIter {
    type Item = [usize; MAX_DIM];

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let out = self.cur;
        let mut k = self.d;
        loop {
            if k == 0 {
                self.done = true;
                break;
            }
            k -= 1;
            self.cur[k] += 1;
            if self.cur[k] < self.hi[k] {
                break;
            }
            self.cur[k] = self.lo[k];
        }
        Some(out)
    }
}

fn flat(c: &[usize], np: usize, d: usize) -> usize {
    c.iter().take(d).fold(0, |acc, &v| acc * np + v)
}

/// Monomial list evaluator with per-axis power tables.
pub(crate) struct MonoEval {
    d: usize,
    deg: usize,
    terms: Vec<([usize; MAX_DIM], f64)>,
}

impl MonoEval {
    pub fn new(p: &Polynomial) -> Self {
        let d = p.dim();
        let mut terms = Vec::new();
        for k in 0..=p.stored_degree() {
            for (a, c) in multi_indices(d, k).into_iter().zip(p.monomials(k)) {
                if c != 0.0 {
                    let mut e = [0usize; MAX_DIM];
                    e[..d].copy_from_slice(a.entries());
                    terms.push((e, c));
                }
            }
        }
        MonoEval {
            d,
            deg: p.stored_degree(),
            terms,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut pw = [[1.0f64; 16]; MAX_DIM];
        for k in 0..self.d {
            for e in 1..=self.deg.min(15) {
                pw[k][e] = pw[k][e - 1] * x[k];
            }
        }
        self.terms
            .iter()
            .map(|(e, c)| {
                let mut v = *c;
                for k in 0..self.d {
                    v *= if e[k] <= 15 { pw[k][e[k]] } else { x[k].powi(e[k] as i32) };
                }
                v
            })
            .sum()
    }
}

impl CubeSample {
    pub fn zeros(dim: usize, n: usize, r: usize, layout: SampleLayout) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(Error::InvalidParameter(format!("dimension {dim} unsupported")));
        }
        if n < 2 || n % 2 != 0 {
            return Err(Error::GridMismatch(format!(
                "cube resolution N = {n} must be even so unit cells align with nodes"
            )));
        }
        if r == 0 {
            return Err(Error::InvalidParameter("cube radius must be positive".into()));
        }
        let per = match layout {
            SampleLayout::Nodal => r * n + 1,
            SampleLayout::Cells => r * n,
        };
        Ok(CubeSample {
            dim,
            n,
            r,
            layout,
            values: vec![0.0; per.pow(dim as u32)],
        })
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn intervals(&self) -> usize {
        self.r * self.n
    }

    pub fn per_axis(&self) -> usize {
        match self.layout {
            SampleLayout::Nodal => self.intervals() + 1,
            SampleLayout::Cells => self.intervals(),
        }
    }

    /// Coordinate of index `j` along an axis.
    pub fn coordinate(&self, j: usize) -> f64 {
        let shift = match self.layout {
            SampleLayout::Nodal => 0.0,
            SampleLayout::Cells => 0.5,
        };
        (j as f64 + shift - (self.intervals() / 2) as f64) * self.h()
    }

    pub fn from_fn(
        dim: usize,
        n: usize,
        r: usize,
        layout: SampleLayout,
        f: impl Fn(&[f64]) -> f64,
    ) -> Result<Self> {
        let mut s = CubeSample::zeros(dim, n, r, layout)?;
        let per = s.per_axis();
        let mut x = [0.0; MAX_DIM];
        for (i, c) in BoxIter::new(dim, &[0; MAX_DIM], &[per; MAX_DIM]).enumerate() {
            for k in 0..dim {
                x[k] = s.coordinate(c[k]);
            }
            s.values[i] = f(&x[..dim]);
        }
        Ok(s)
    }

    /// Nodal sample of a polynomial.
    pub fn from_polynomial(n: usize, r: usize, p: &Polynomial) -> Result<Self> {
        let ev = MonoEval::new(p);
        CubeSample::from_fn(p.dim(), n, r, SampleLayout::Nodal, |x| ev.eval(x))
    }

    pub fn is_boundary(&self, c: &[usize]) -> bool {
        let last = self.per_axis() - 1;
        c.iter().take(self.dim).any(|&v| v == 0 || v == last)
    }

    /// The centered sub-cube `Q_r`.
    pub fn restrict(&self, r: usize) -> Result<CubeSample> {
        if r > self.r || r == 0 {
            return Err(Error::WindowTooSmall(format!("Q_{r} is not inside Q_{}", self.r)));
        }
        let off = (self.r - r) * self.n / 2;
        let mut out = CubeSample::zeros(self.dim, self.n, r, self.layout)?;
        let per = out.per_axis();
        let bp = self.per_axis();
        let d = self.dim;
        for (i, c) in BoxIter::new(d, &[0; MAX_DIM], &[per; MAX_DIM]).enumerate() {
            let mut src = [0usize; MAX_DIM];
            for k in 0..d {
                src[k] = c[k] + off;
            }
            out.values[i] = self.values[flat(&src, bp, d)];
        }
        Ok(out)
    }

    pub fn sub(&self, other: &CubeSample) -> Result<CubeSample> {
        if self.dim != other.dim || self.n != other.n || self.r != other.r || self.layout != other.layout {
            return Err(Error::GridMismatch("samples on different cubes".into()));
        }
        let mut out = self.clone();
        for (a, b) in out.values.iter_mut().zip(&other.values) {
            *a -= b;
        }
        Ok(out)
    }

    /// Exact average over the unit cell `z + Q₁` (trapezoid weights for the
    /// Q1 interpolant, plain means for cell values).
    pub fn cell_average(&self, z: &[i64]) -> Result<f64> {
        let d = self.dim;
        let n = self.n as i64;
        let half = (self.intervals() / 2) as i64;
        let mut lo = [0usize; MAX_DIM];
        for k in 0..d {
            let start = half + z[k] * n - n / 2;
            if start < 0 || start + n > self.intervals() as i64 {
                return Err(Error::WindowTooSmall(format!(
                    "cell {:?} leaves Q_{}",
                    &z[..d],
                    self.r
                )));
            }
            lo[k] = start as usize;
        }
        let per = self.per_axis();
        let nn = self.n;
        match self.layout {
            SampleLayout::Nodal => {
                let mut hi = [0usize; MAX_DIM];
                for k in 0..d {
                    hi[k] = lo[k] + nn + 1;
                }
                let mut acc = 0.0;
                for c in BoxIter::new(d, &lo, &hi) {
                    let mut w = 1.0;
                    for k in 0..d {
                        if c[k] == lo[k] || c[k] == lo[k] + nn {
                            w *= 0.5;
                        }
                    }
                    acc += w * self.values[flat(&c, per, d)];
                }
                Ok(acc / (nn as f64).powi(d as i32))
            }
            SampleLayout::Cells => {
                let mut hi = [0usize; MAX_DIM];
                for k in 0..d {
                    hi[k] = lo[k] + nn;
                }
                let acc: f64 = BoxIter::new(d, &lo, &hi)
                    .map(|c| self.values[flat(&c, per, d)])
                    .sum();
                Ok(acc / (nn as f64).powi(d as i32))
            }
        }
    }
}

/// Region of an [`lp_norm`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Region {
    /// Centered cube of side `r`.
    Cube(f64),
    /// Centered ball of radius `r`.
    Ball(f64),
}

/// Volume-normalized `(|U|⁻¹ ∫_U |u|^p)^{1/p}`, with `U` the union of the fine
/// cells whose centers lie in the region. Nodal samples are integrated with the
/// two-point Gauss rule per fine cell, which is exact for `p = 2`.
pub fn lp_norm(s: &CubeSample, region: Region, p: f64) -> Result<f64> {
    let d = s.dim;
    let ext = match region {
        Region::Cube(r) => r / 2.0,
        Region::Ball(r) => r,
    };
    if !(ext > 0.0) || ext > s.r as f64 / 2.0 + 1e-12 {
        return Err(Error::WindowTooSmall(format!(
            "{region:?} is not inside Q_{}",
            s.r
        )));
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidParameter(format!("exponent {p} must be at least 1")));
    }
    let h = s.h();
    let cells = s.intervals();
    let half = (cells / 2) as f64;
    let center = |c: usize| (c as f64 + 0.5 - half) * h;
    // index range of cells whose centers can be inside
    let lo_c = ((half - ext / h - 1.0).floor().max(0.0)) as usize;
    let hi_c = (((half + ext / h + 1.0).ceil()) as usize).min(cells);
    let inside = |c: &[usize]| match region {
        Region::Cube(r) => c.iter().take(d).all(|&v| center(v).abs() < r / 2.0),
        Region::Ball(r) => c.iter().take(d).map(|&v| center(v).powi(2)).sum::<f64>() < r * r,
    };
    let per = s.per_axis();
    let q = Q1::new(d);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in BoxIter::new(d, &[lo_c; MAX_DIM], &[hi_c; MAX_DIM]) {
        if !inside(&c) {
            continue;
        }
        count += 1;
        match s.layout {
            SampleLayout::Cells => total += s.values[flat(&c, per, d)].abs().powf(p),
            SampleLayout::Nodal => {
                let mut vv = [0.0; 8];
                for (e, v) in vv.iter_mut().enumerate().take(q.nv) {
                    let mut idx = [0usize; MAX_DIM];
                    for k in 0..d {
                        idx[k] = c[k] + ((e >> k) & 1);
                    }
                    *v = s.values[flat(&idx, per, d)];
                }
                let mut acc = 0.0;
                for g in 0..q.nv {
                    let u: f64 = (0..q.nv).map(|e| q.val[g * q.nv + e] * vv[e]).sum();
                    acc += u.abs().powf(p);
                }
                total += acc / q.nv as f64;
            }
        }
    }
    if count == 0 {
        return Err(Error::WindowTooSmall(format!("{region:?} contains no cells")));
    }
    Ok((total / count as f64).powf(1.0 / p))
}

/// Applies the 1D Q1 mass matrix along every axis of a box of `np^d` nodes.
fn mass_apply_box(vals: &mut [f64], np: usize, d: usize, h: f64) {
    let mut stride = 1;
    for _ in 0..d {
        let total = vals.len();
        let block = stride * np;
        let old = vals.to_vec();
        for base in (0..total).step_by(block) {
            for s in 0..stride {
                for i in 0..np {
                    let idx = base + s + i * stride;
                    let mut v = if i == 0 || i == np - 1 { 2.0 } else { 4.0 } * old[idx];
                    if i > 0 {
                        v += old[idx - stride];
                    }
                    if i + 1 < np {
                        v += old[idx + stride];
                    }
                    vals[idx] = v * h / 6.0;
                }
            }
        }
        stride *= np;
    }
}

/// Per-component `‖D^α u‖_{L²(Q₁)}` of the lattice differences, `|α| = m`,
/// stored in a symmetric tensor over shift multi-indices.
pub fn lattice_difference_tensor(s: &CubeSample, m: usize) -> Result<SymTensor> {
    let d = s.dim;
    if s.r < 2 * m + 1 {
        return Err(Error::WindowTooSmall(format!(
            "order-{m} differences on Q₁ need R ≥ {}, got {}",
            2 * m + 1,
            s.r
        )));
    }
    let n = s.n;
    let per = s.per_axis();
    let box_np = match s.layout {
        SampleLayout::Nodal => n + 1,
        SampleLayout::Cells => n,
    };
    let start = (s.intervals() - n) / 2;
    let mut out = SymTensor::zeros(d, m);
    for alpha in multi_indices(d, m) {
        let mut g = vec![0.0; box_np.pow(d as u32)];
        for beta in multi_indices_below(&alpha) {
            let sign = if (m - beta.order()) % 2 == 0 { 1.0 } else { -1.0 };
            let w = sign * alpha.binomial(&beta);
            for (i, c) in BoxIter::new(d, &[0; MAX_DIM], &[box_np; MAX_DIM]).enumerate() {
                let mut idx = [0usize; MAX_DIM];
                for k in 0..d {
                    idx[k] = start + c[k] + beta.entries()[k] * n;
                }
                g[i] += w * s.values[flat(&idx, per, d)];
            }
        }
        let norm = match s.layout {
            SampleLayout::Nodal => {
                let mut mg = g.clone();
                mass_apply_box(&mut mg, box_np, d, s.h());
                dot(&g, &mg).max(0.0).sqrt()
            }
            SampleLayout::Cells => (dot(&g, &g) / g.len() as f64).sqrt(),
        };
        out.set(&alpha, norm);
    }
    Ok(out)
}

/// `‖D^m u‖_{L²(Q₁)}` with the symmetric tensor norm over shift indices.
pub fn lattice_difference_norm(s: &CubeSample, m: usize) -> Result<f64> {
    let t = lattice_difference_tensor(s, m)?;
    Ok(t
        .iter()
        .map(|(a, v)| multinomial_f64(a.entries()) * v * v)
        .sum::<f64>()
        .sqrt())
}

/// All `β ≤ α` componentwise.
pub(crate) fn multi_indices_below(alpha: &MultiIndex) -> Vec<MultiIndex> {
    let e = alpha.entries();
    let d = e.len();
    let hi: Vec<usize> = e.iter().map(|v| v + 1).collect();
    BoxIter::new(d, &[0; MAX_DIM], &hi)
        .map(|c| MultiIndex::new(c[..d].to_vec()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preconditioner {
    Multigrid,
    Jacobi,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub preconditioner: Preconditioner,
    /// Gauss–Seidel sweeps before and after each coarse correction.
    pub smoothing: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 400,
            preconditioner: Preconditioner::Multigrid,
            smoothing: 2,
        }
    }
}

struct Level {
    /// Intervals per axis.
    m: usize,
    /// Per-axis periodic key times its flat weight, by level index.
    keyw: [Vec<usize>; MAX_DIM],
    /// `table[key * 3^d + o]`.
    table: Vec<f64>,
    /// Flat offsets of the stencil neighbors.
    nbr: Vec<isize>,
}

impl Level {
    fn np(&self) -> usize {
        self.m + 1
    }
}

struct CoarseSolver {
    index: Vec<usize>,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

/// The Dirichlet operator on the interior nodes of `Q_R`, with its multigrid
/// hierarchy.
pub struct CubeOperator {
    d: usize,
    n: usize,
    no: usize,
    levels: Vec<Level>,
    coarse: CoarseSolver,
    smoothing: usize,
}

const COARSE_DIRECT_MAX: usize = 2500;

fn p_weight(g: &[isize], d: usize) -> f64 {
    let mut w = 1.0;
    for &v in g.iter().take(d) {
        match v.abs() {
            0 => {}
            1 => w *= 0.5,
            _ => return 0.0,
        }
    }
    w
}

impl CubeOperator {
    pub fn new(field: &GridField, r: usize, smoothing: usize) -> Result<Self> {
        let d = field.dim;
        let n = field.n;
        if n % 2 != 0 {
            return Err(Error::GridMismatch(format!("cell resolution {n} must be even")));
        }
        let no = n_offsets(d);
        let m0 = r * n;
        let half = m0 / 2;
        let key_weight = |k: usize| n.pow((d - 1 - k) as u32);
        let make_keys = |m: usize, stride: usize| -> [Vec<usize>; MAX_DIM] {
            let mut keys: [Vec<usize>; MAX_DIM] = [vec![0], vec![0], vec![0]];
            for (k, kv) in keys.iter_mut().enumerate().take(d) {
                *kv = (0..=m)
                    .map(|j| ((j * stride) as i64 - half as i64).rem_euclid(n as i64) as usize * key_weight(k))
                    .collect();
            }
            keys
        };
        let make_nbr = |np: usize| -> Vec<isize> {
            (0..no)
                .map(|o| {
                    let off = offset(d, o);
                    let mut s = 0isize;
                    for k in 0..d {
                        s = s * np as isize + off[k];
                    }
                    s
                })
                .collect()
        };
        let fine = PeriodicStencil::build(field, &Q1::new(d));
        let mut levels = vec![Level {
            m: m0,
            keyw: make_keys(m0, 1),
            table: fine.coeffs,
            nbr: make_nbr(m0 + 1),
        }];
        let mut stride = 1usize;
        loop {
            let lv = levels.last().expect("nonempty");
            let m = lv.m;
            if m % 2 != 0 || m / 2 < 2 || (m - 1).pow(d as u32) <= 64 {
                break;
            }
            let mc = m / 2;
            let sc = stride * 2;
            // occurring coarse keys per axis
            let mut axis_keys: Vec<Vec<usize>> = Vec::new();
            for _ in 0..d {
                let mut ks: Vec<usize> = (1..mc)
                    .map(|j| ((j * sc) as i64 - half as i64).rem_euclid(n as i64) as usize)
                    .collect();
                ks.sort_unstable();
                ks.dedup();
                axis_keys.push(ks);
            }
            let ntab = n.pow(d as u32);
            let mut table = vec![0.0; ntab * no];
            let lens: Vec<usize> = axis_keys.iter().map(|v| v.len()).collect();
            for combo in BoxIter::new(d, &[0; MAX_DIM], &lens) {
                let mut t = [0usize; MAX_DIM];
                for k in 0..d {
                    t[k] = axis_keys[k][combo[k]];
                }
                let tc = flat(&t, n, d);
                for oc in 0..no {
                    let delta = offset(d, oc);
                    let mut acc = 0.0;
                    for og in 0..no {
                        let g = offset(d, og);
                        let wg = p_weight(&g, d);
                        let mut tf = [0usize; MAX_DIM];
                        for k in 0..d {
                            tf[k] = ((t[k] as isize + stride as isize * g[k]).rem_euclid(n as isize)) as usize;
                        }
                        let fk = flat(&tf, n, d);
                        for oe in 0..no {
                            let e = offset(d, oe);
                            let mut hh = [0isize; MAX_DIM];
                            for k in 0..d {
                                hh[k] = g[k] + e[k] - 2 * delta[k];
                            }
                            let wh = p_weight(&hh, d);
                            if wh != 0.0 {
                                acc += wg * lv.table[fk * no + oe] * wh;
                            }
                        }
                    }
                    table[tc * no + oc] = acc;
                }
            }
            levels.push(Level {
                m: mc,
                keyw: make_keys(mc, sc),
                table,
                nbr: make_nbr(mc + 1),
            });
            stride = sc;
        }
        let mut op = CubeOperator {
            d,
            n,
            no,
            levels,
            coarse: CoarseSolver {
                index: Vec::new(),
                lu: None,
            },
            smoothing,
        };
        op.coarse = op.build_coarse();
        Ok(op)
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn len(&self) -> usize {
        self.levels[0].np().pow(self.d as u32)
    }

    fn for_interior(&self, l: usize, reverse: bool, mut f: impl FnMut(usize, usize)) {
        let lv = &self.levels[l];
        let np = lv.np();
        let d = self.d;
        let mut ranges = [(0usize, 1usize); MAX_DIM];
        let mut strides = [0usize; MAX_DIM];
        for k in 0..d {
            ranges[k] = (1, np - 1);
            strides[k] = np.pow((d - 1 - k) as u32);
        }
        let pick = |r: (usize, usize), i: usize| if reverse { r.1 - 1 - (i - r.0) } else { i };
        for i0 in ranges[0].0..ranges[0].1 {
            let j0 = pick(ranges[0], i0);
            let f0 = j0 * strides[0];
            let k0 = lv.keyw[0][j0];
            for i1 in ranges[1].0..ranges[1].1 {
                let j1 = pick(ranges[1], i1);
                let f1 = f0 + j1 * strides[1];
                let k1 = k0 + lv.keyw[1][j1];
                for i2 in ranges[2].0..ranges[2].1 {
                    let j2 = pick(ranges[2], i2);
                    f(f1 + j2 * strides[2], k1 + lv.keyw[2][j2]);
                }
            }
        }
    }

    /// `y = A x` on interior rows; boundary rows of `y` are zero. Boundary
    /// entries of `x` act as Dirichlet data.
    fn apply_level(&self, l: usize, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        let lv = &self.levels[l];
        let no = self.no;
        self.for_interior(l, false, |fi, key| {
            let s = &lv.table[key * no..(key + 1) * no];
            let mut acc = 0.0;
            for o in 0..no {
                acc += s[o] * x[(fi as isize + lv.nbr[o]) as usize];
            }
            y[fi] = acc;
        });
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.apply_level(0, x, y);
    }

    fn gauss_seidel(&self, l: usize, b: &[f64], x: &mut [f64], reverse: bool) {
        let lv = &self.levels[l];
        let no = self.no;
        let center = no / 2;
        self.for_interior(l, reverse, |fi, key| {
            let s = &lv.table[key * no..(key + 1) * no];
            let mut acc = b[fi];
            for o in 0..no {
                if o != center {
                    acc -= s[o] * x[(fi as isize + lv.nbr[o]) as usize];
                }
            }
            x[fi] = acc / s[center];
        });
    }

    pub fn diag(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let lv = &self.levels[0];
        let no = self.no;
        self.for_interior(0, false, |fi, key| out[fi] = lv.table[key * no + no / 2]);
        out
    }

    fn build_coarse(&self) -> CoarseSolver {
        let l = self.levels.len() - 1;
        let lv = &self.levels[l];
        let mut index = Vec::new();
        self.for_interior(l, false, |fi, _| index.push(fi));
        if index.len() > COARSE_DIRECT_MAX {
            return CoarseSolver { index, lu: None };
        }
        let mut pos = vec![usize::MAX; lv.np().pow(self.d as u32)];
        for (i, &fi) in index.iter().enumerate() {
            pos[fi] = i;
        }
        let nn = index.len();
        let mut a = DMatrix::<f64>::zeros(nn, nn);
        let no = self.no;
        self.for_interior(l, false, |fi, key| {
            let i = pos[fi];
            for o in 0..no {
                let nb = (fi as isize + lv.nbr[o]) as usize;
                if pos[nb] != usize::MAX {
                    a[(i, pos[nb])] += lv.table[key * no + o];
                }
            }
        });
        CoarseSolver {
            index,
            lu: Some(a.lu()),
        }
    }

    fn coarse_solve(&self, b: &[f64], x: &mut [f64]) {
        let l = self.levels.len() - 1;
        match &self.coarse.lu {
            Some(lu) => {
                let rhs = DVector::from_iterator(self.coarse.index.len(), self.coarse.index.iter().map(|&i| b[i]));
                let sol = lu.solve(&rhs).unwrap_or_else(|| DVector::zeros(rhs.len()));
                for (k, &i) in self.coarse.index.iter().enumerate() {
                    x[i] = sol[k];
                }
            }
            None => {
                for _ in 0..30 {
                    self.gauss_seidel(l, b, x, false);
                    self.gauss_seidel(l, b, x, true);
                }
            }
        }
    }

    fn restrict(&self, l: usize, r: &[f64], rc: &mut [f64]) {
        rc.iter_mut().for_each(|v| *v = 0.0);
        let d = self.d;
        let npf = self.levels[l].np();
        let npc = self.levels[l + 1].np();
        for c in BoxIter::new(d, &[1; MAX_DIM], &[npc - 1; MAX_DIM]) {
            let mut acc = 0.0;
            for og in 0..self.no {
                let g = offset(d, og);
                let mut idx = [0usize; MAX_DIM];
                for k in 0..d {
                    idx[k] = (2 * c[k] as isize + g[k]) as usize;
                }
                acc += p_weight(&g, d) * r[flat(&idx, npf, d)];
            }
            rc[flat(&c, npc, d)] = acc;
        }
    }

    fn prolong_add(&self, l: usize, xc: &[f64], x: &mut [f64]) {
        let d = self.d;
        let npf = self.levels[l].np();
        let npc = self.levels[l + 1].np();
        for c in BoxIter::new(d, &[1; MAX_DIM], &[npc - 1; MAX_DIM]) {
            let v = xc[flat(&c, npc, d)];
            if v == 0.0 {
                continue;
            }
            for og in 0..self.no {
                let g = offset(d, og);
                let mut idx = [0usize; MAX_DIM];
                for k in 0..d {
                    idx[k] = (2 * c[k] as isize + g[k]) as usize;
                }
                x[flat(&idx, npf, d)] += p_weight(&g, d) * v;
            }
        }
    }

    fn vcycle(&self, l: usize, b: &[f64], x: &mut [f64]) {
        x.iter_mut().for_each(|v| *v = 0.0);
        if l == self.levels.len() - 1 {
            self.coarse_solve(b, x);
            return;
        }
        for _ in 0..self.smoothing {
            self.gauss_seidel(l, b, x, false);
        }
        let len = b.len();
        let mut r = vec![0.0; len];
        self.apply_level(l, x, &mut r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let nc = self.levels[l + 1].np().pow(self.d as u32);
        let mut bc = vec![0.0; nc];
        self.restrict(l, &r, &mut bc);
        let mut xc = vec![0.0; nc];
        self.vcycle(l + 1, &bc, &mut xc);
        self.prolong_add(l, &xc, x);
        for _ in 0..self.smoothing {
            self.gauss_seidel(l, b, x, true);
        }
    }

    /// One symmetric V-cycle from a zero initial guess.
    pub fn precondition(&self, b: &[f64], x: &mut [f64]) {
        self.vcycle(0, b, x);
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CubeProblem {
    pub field: GridField,
    pub r: usize,
    /// Nodal Dirichlet data; interior values are ignored.
    pub boundary: CubeSample,
    /// Nodal samples of `f` in `−∇·a∇u = f`.
    pub rhs: Option<CubeSample>,
    pub seed: Option<u64>,
    pub label: String,
}

impl CubeProblem {
    pub fn new(field: &GridField, boundary: CubeSample, label: &str) -> Result<Self> {
        if boundary.dim != field.dim || boundary.n != field.n || boundary.layout != SampleLayout::Nodal {
            return Err(Error::GridMismatch(
                "boundary data must be a nodal sample at the cell resolution".into(),
            ));
        }
        Ok(CubeProblem {
            field: field.clone(),
            r: boundary.r,
            boundary,
            rhs: None,
            seed: None,
            label: label.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CubeSolution {
    pub sample: CubeSample,
    pub stats: KrylovStats,
    pub fingerprint: String,
    pub r: usize,
    pub seed: Option<u64>,
    pub label: String,
}

/// Q1 weak form `∫ f v_ν` of nodal samples on the cube.
fn weak_rhs(f: &CubeSample) -> Vec<f64> {
    let mut v = f.values.clone();
    mass_apply_box(&mut v, f.per_axis(), f.dim, f.h());
    v
}

pub fn solve_dirichlet(p: &CubeProblem) -> Result<CubeSolution> {
    solve_dirichlet_with(p, SolverOptions::default())
}

pub fn solve_dirichlet_with(p: &CubeProblem, opts: SolverOptions) -> Result<CubeSolution> {
    let op = CubeOperator::new(&p.field, p.r, opts.smoothing)?;
    solve_with_operator(p, &op, opts)
}

/// Solves with a prebuilt operator, so that one hierarchy serves many data.
pub fn solve_with_operator(p: &CubeProblem, op: &CubeOperator, opts: SolverOptions) -> Result<CubeSolution> {
    let g = &p.boundary;
    if op.len() != g.values.len() || op.n() != g.n {
        return Err(Error::GridMismatch("operator and boundary data differ".into()));
    }
    let d = g.dim;
    let per = g.per_axis();
    let mut u0 = vec![0.0; g.values.len()];
    for (i, c) in BoxIter::new(d, &[0; MAX_DIM], &[per; MAX_DIM]).enumerate() {
        if g.is_boundary(&c) {
            u0[i] = g.values[i];
        }
    }
    let mut b = vec![0.0; u0.len()];
    op.apply(&u0, &mut b);
    b.iter_mut().for_each(|v| *v = -*v);
    if let Some(f) = &p.rhs {
        if f.values.len() != u0.len() || f.layout != SampleLayout::Nodal {
            return Err(Error::GridMismatch("right-hand side sample".into()));
        }
        let wf = weak_rhs(f);
        let mut interior = vec![0.0; u0.len()];
        op.for_interior(0, false, |fi, _| interior[fi] = 1.0);
        for i in 0..b.len() {
            b[i] += interior[i] * wf[i];
        }
    }
    let inv_diag: Vec<f64> = op.diag().iter().map(|&v| if v != 0.0 { 1.0 / v } else { 0.0 }).collect();
    let apply = |x: &[f64], y: &mut [f64]| op.apply(x, y);
    let mg = |r: &[f64], z: &mut [f64]| op.precondition(r, z);
    let jac = |r: &[f64], z: &mut [f64]| {
        for ((z, r), s) in z.iter_mut().zip(r).zip(&inv_diag) {
            *z = r * s;
        }
    };
    let sys = System {
        apply: &apply,
        precond: match opts.preconditioner {
            Preconditioner::Multigrid => &mg,
            Preconditioner::Jacobi => &jac,
        },
        project: None,
    };
    let mut x = vec![0.0; u0.len()];
    let stats = if p.field.symmetric {
        pcg(&sys, &b, &mut x, opts.tol, opts.max_iter)
    } else {
        bicgstab(&sys, &b, &mut x, opts.tol, opts.max_iter)
    };
    if !stats.converged {
        return Err(Error::NotConverged {
            iterations: stats.iterations,
            residual: stats.residual,
        });
    }
    for (xi, ui) in x.iter_mut().zip(&u0) {
        *xi += ui;
    }
    Ok(CubeSolution {
        sample: CubeSample {
            dim: d,
            n: g.n,
            r: g.r,
            layout: SampleLayout::Nodal,
            values: x,
        },
        stats,
        fingerprint: p.field.fingerprint.clone(),
        r: p.r,
        seed: p.seed,
        label: p.label.clone(),
    })
}

/// `½ ∫_{Q_R} ∇u · a∇u` of a nodal sample.
pub fn dirichlet_energy(field: &GridField, s: &CubeSample) -> Result<f64> {
    if s.layout != SampleLayout::Nodal || s.n != field.n || s.dim != field.dim {
        return Err(Error::GridMismatch("energy needs a nodal sample at the cell resolution".into()));
    }
    let d = s.dim;
    let q = Q1::new(d);
    let em = element_matrices(field, &q);
    let nv = q.nv;
    let n = field.n;
    let half = s.intervals() / 2;
    let per = s.per_axis();
    let mut total = 0.0;
    for c in BoxIter::new(d, &[0; MAX_DIM], &[s.intervals(); MAX_DIM]) {
        let mut key = [0usize; MAX_DIM];
        for k in 0..d {
            key[k] = ((c[k] as i64 - half as i64).rem_euclid(n as i64)) as usize;
        }
        let e = &em[flat(&key, n, d) * nv * nv..(flat(&key, n, d) + 1) * nv * nv];
        let mut vv = [0.0; 8];
        for (v, slot) in vv.iter_mut().enumerate().take(nv) {
            let mut idx = [0usize; MAX_DIM];
            for k in 0..d {
                idx[k] = c[k] + ((v >> k) & 1);
            }
            *slot = s.values[flat(&idx, per, d)];
        }
        for a in 0..nv {
            for b in 0..nv {
                total += vv[a] * e[a * nv + b] * vv[b];
            }
        }
    }
    Ok(0.5 * total)
}

/// Nodal boundary data from a polynomial (interior values included).
pub fn boundary_polynomial(n: usize, r: usize, p: &Polynomial) -> Result<CubeSample> {
    CubeSample::from_polynomial(n, r, p)
}

/// Seeded i.i.d. standard normal values on the boundary nodes, followed by one
/// Jacobi sweep of the boundary graph Laplacian (each value replaced by the
/// mean of its boundary neighbors).
pub fn boundary_random(d: usize, n: usize, r: usize, seed: u64) -> Result<CubeSample> {
    let mut s = CubeSample::zeros(d, n, r, SampleLayout::Nodal)?;
    let per = s.per_axis();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bnd = Vec::new();
    for (i, c) in BoxIter::new(d, &[0; MAX_DIM], &[per; MAX_DIM]).enumerate() {
        if s.is_boundary(&c) {
            s.values[i] = StandardNormal.sample(&mut rng);
            bnd.push((i, c));
        }
    }
    let raw = s.values.clone();
    let no = n_offsets(d);
    for (i, c) in &bnd {
        let mut acc = 0.0;
        let mut cnt = 0usize;
        for o in 0..no {
            let off = offset(d, o);
            if off.iter().take(d).all(|&v| v == 0) {
                continue;
            }
            let mut idx = [0usize; MAX_DIM];
            let mut ok = true;
            for k in 0..d {
                let v = c[k] as isize + off[k];
                if v < 0 || v >= per as isize {
                    ok = false;
                    break;
                }
                idx[k] = v as usize;
            }
            if ok && s.is_boundary(&idx) {
                acc += raw[flat(&idx, per, d)];
                cnt += 1;
            }
        }
        s.values[*i] = acc / cnt as f64;
    }
    Ok(s)
}

fn layout_name(l: SampleLayout) -> &'static str {
    match l {
        SampleLayout::Nodal => "nodal",
        SampleLayout::Cells => "cells",
    }
}

impl CubeSolution {
    /// Cache file name keyed by field fingerprint, radius and boundary label.
    pub fn cache_path(dir: &Path, fingerprint: &str, r: usize, label: &str) -> PathBuf {
        let fp: String = fingerprint.chars().take(16).collect();
        dir.join(format!("solution-{fp}-R{r}-{label}.bin"))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "kind": "cube_solution",
            "fingerprint": self.fingerprint,
            "d": self.sample.dim,
            "N": self.sample.n,
            "R": self.r,
            "seed": self.seed,
            "label": self.label,
            "layout": layout_name(self.sample.layout),
            "iterations": self.stats.iterations,
            "residual": self.stats.residual,
        }));
        c.push("u", self.sample.values.clone());
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path, fingerprint: &str) -> Result<Self> {
        let c = Container::load(path)?;
        c.check_fingerprint(fingerprint)?;
        let h = &c.header;
        if h["kind"] != "cube_solution" {
            return Err(Error::Format("not a cube solution".into()));
        }
        let get = |k: &str| {
            h[k].as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("header field `{k}`")))
        };
        let (d, n, r) = (get("d")?, get("N")?, get("R")?);
        let layout = if h["layout"] == "cells" {
            SampleLayout::Cells
        } else {
            SampleLayout::Nodal
        };
        let mut sample = CubeSample::zeros(d, n, r, layout)?;
        let u = c.array("u")?;
        if u.len() != sample.values.len() {
            return Err(Error::Truncated {
                expected: sample.values.len(),
                found: u.len(),
            });
        }
        sample.values.copy_from_slice(u);
        Ok(CubeSolution {
            sample,
            stats: KrylovStats {
                iterations: get("iterations")?,
                residual: h["residual"].as_f64().unwrap_or(f64::NAN),
                converged: true,
            },
            fingerprint: fingerprint.to_string(),
            r,
            seed: h["seed"].as_u64(),
            label: h["label"].as_str().unwrap_or("").to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{gallery_field, sample_field};
    use serde_json::json;

    fn field(name: &str, d: usize, n: usize) -> GridField {
        sample_field(&gallery_field(name, d, &json!({})).unwrap(), n).unwrap()
    }

    fn solve(g: &GridField, r: usize, p: &Polynomial) -> CubeSolution {
        let b = boundary_polynomial(g.n, r, p).unwrap();
        solve_dirichlet(&CubeProblem::new(g, b, "poly").unwrap()).unwrap()
    }

    #[test]
    fn linear_data_is_reproduced() {
        let g = field("constant", 2, 8);
        let x1 = Polynomial::coordinate(2, 0);
        let s = solve(&g, 6, &x1);
        let exact = CubeSample::from_polynomial(8, 6, &x1).unwrap();
        let err = s.sample.sub(&exact).unwrap().values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn zero_data_gives_zero() {
        let g = field("trig2d", 2, 8);
        let s = solve(&g, 4, &Polynomial::zero(2));
        assert!(s.sample.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_and_harmonic_quadratic_are_discrete_harmonic() {
        let g = field("constant", 2, 8);
        for mono in [vec![1usize, 1], vec![2, 0]] {
            let mut p = Polynomial::monomial(&MultiIndex::new(mono.clone()), 1.0);
            if mono == [2, 0] {
                p = p.sub(&Polynomial::monomial(&MultiIndex::new(vec![0, 2]), 1.0));
            }
            let s = solve(&g, 4, &p);
            let exact = CubeSample::from_polynomial(8, 4, &p).unwrap();
            let err = s.sample.sub(&exact).unwrap().values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(err < 1e-9, "{mono:?}: {err}");
        }
    }

    #[test]
    fn multigrid_matches_jacobi() {
        for name in ["trig2d", "rotating"] {
            let g = field(name, 2, 8);
            let b = boundary_random(2, 8, 8, 7).unwrap();
            let p = CubeProblem::new(&g, b, "rand").unwrap();
            let a = solve_dirichlet(&p).unwrap();
            let jac = SolverOptions {
                preconditioner: Preconditioner::Jacobi,
                max_iter: 20000,
                ..SolverOptions::default()
            };
            let j = solve_dirichlet_with(&p, jac).unwrap();
            let err = a.sample.sub(&j.sample).unwrap().values.iter().fold(0.0f64, |x, v| x.max(v.abs()));
            assert!(err < 1e-7, "{name}: {err}");
            assert!(a.stats.iterations < j.stats.iterations);
        }
    }

    #[test]
    fn three_dimensional_solve() {
        let g = field("constant", 3, 4);
        let p = Polynomial::coordinate(3, 2).add(&Polynomial::monomial(&MultiIndex::new(vec![1, 1, 0]), 1.0));
        let s = solve(&g, 4, &p);
        let exact = CubeSample::from_polynomial(4, 4, &p).unwrap();
        let err = s.sample.sub(&exact).unwrap().values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-9);
    }

    #[test]
    fn poisson_right_hand_side() {
        // −Δu = 2 with u = −x₁² + x₁ x₂ is matched to O(h²)
        let g = field("constant", 2, 16);
        let p = Polynomial::from_monomials(2, &[vec![0.0], vec![0.0, 0.0], vec![-1.0, 1.0, 0.0]]);
        let b = boundary_polynomial(16, 2, &p).unwrap();
        let mut prob = CubeProblem::new(&g, b, "poisson").unwrap();
        prob.rhs = Some(CubeSample::from_fn(2, 16, 2, SampleLayout::Nodal, |_| 2.0).unwrap());
        let s = solve_dirichlet(&prob).unwrap();
        let exact = CubeSample::from_polynomial(16, 2, &p).unwrap();
        let err = s.sample.sub(&exact).unwrap().values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn lattice_differences_of_polynomials() {
        let x1x2 = Polynomial::monomial(&MultiIndex::new(vec![1, 1]), 1.0);
        let s = CubeSample::from_polynomial(4, 5, &x1x2).unwrap();
        let t = lattice_difference_tensor(&s, 2).unwrap();
        assert!((t.get(&MultiIndex::new(vec![1, 1])) - 1.0).abs() < 1e-12);
        assert!(t.get(&MultiIndex::new(vec![2, 0])).abs() < 1e-12);
        assert!(t.get(&MultiIndex::new(vec![0, 2])).abs() < 1e-12);
        let sq = Polynomial::monomial(&MultiIndex::new(vec![2, 0]), 1.0);
        let s = CubeSample::from_polynomial(4, 5, &sq).unwrap();
        let t = lattice_difference_tensor(&s, 2).unwrap();
        assert!((t.get(&MultiIndex::new(vec![2, 0])) - 2.0).abs() < 1e-12);
        let c = CubeSample::from_polynomial(4, 9, &Polynomial::constant(2, 3.0)).unwrap();
        for m in 1..=4 {
            assert!(lattice_difference_norm(&c, m).unwrap().abs() < 1e-12);
        }
        assert!(matches!(lattice_difference_norm(&c, 5), Err(Error::WindowTooSmall(_))));
    }

    #[test]
    fn lp_norm_examples() {
        let three = CubeSample::from_fn(2, 8, 4, SampleLayout::Nodal, |_| 3.0).unwrap();
        assert!((lp_norm(&three, Region::Cube(2.0), 2.0).unwrap() - 3.0).abs() < 1e-14);
        let half = CubeSample::from_fn(2, 8, 2, SampleLayout::Cells, |x| if x[0] > 0.0 { 1.0 } else { 0.0 }).unwrap();
        assert!((lp_norm(&half, Region::Cube(2.0), 2.0).unwrap() - 0.5f64.sqrt()).abs() < 1e-14);
        let x1 = CubeSample::from_polynomial(8, 2, &Polynomial::coordinate(2, 0)).unwrap();
        assert!((lp_norm(&x1, Region::Cube(2.0), 2.0).unwrap() - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(lp_norm(&x1, Region::Ball(1.5), 2.0).is_err());
        let ball = lp_norm(&three, Region::Ball(1.0), 1.0).unwrap();
        assert!((ball - 3.0).abs() < 1e-13);
    }

    #[test]
    fn cell_averages_are_exact() {
        let s = CubeSample::from_polynomial(4, 5, &Polynomial::coordinate(2, 0)).unwrap();
        for z in -2..=2i64 {
            assert!((s.cell_average(&[z, 1]).unwrap() - z as f64).abs() < 1e-13);
        }
        assert!(s.cell_average(&[3, 0]).is_err());
    }

    #[test]
    fn energy_is_minimal_and_maximum_principle_holds() {
        use rand::Rng;
        let g = field("trig2d", 2, 8);
        let b = boundary_random(2, 8, 3, 3).unwrap();
        let p = CubeProblem::new(&g, b.clone(), "rand").unwrap();
        let u = solve_dirichlet(&p).unwrap().sample;
        let e0 = dirichlet_energy(&g, &u).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let per = u.per_axis();
        for _ in 0..20 {
            let mut v = u.clone();
            for (i, c) in BoxIter::new(2, &[0; MAX_DIM], &[per; MAX_DIM]).enumerate() {
                if !v.is_boundary(&c) {
                    v.values[i] += 1e-3 * rng.gen_range(-1.0..1.0);
                }
            }
            assert!(dirichlet_energy(&g, &v).unwrap() > e0);
        }
        let bvals: Vec<f64> = BoxIter::new(2, &[0; MAX_DIM], &[per; MAX_DIM])
            .enumerate()
            .filter(|(_, c)| b.is_boundary(c))
            .map(|(i, _)| b.values[i])
            .collect();
        let lo = bvals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = bvals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(u.values.iter().all(|&v| v >= lo - 1e-10 && v <= hi + 1e-10));
    }

    #[test]
    fn solution_round_trip() {
        let g = field("trig2d", 2, 4);
        let mut p = CubeProblem::new(&g, boundary_random(2, 4, 4, 1).unwrap(), "seed1").unwrap();
        p.seed = Some(1);
        let s = solve_dirichlet(&p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = CubeSolution::cache_path(dir.path(), &g.fingerprint, 4, "seed1");
        s.save(&path).unwrap();
        let back = CubeSolution::load(&path, &g.fingerprint).unwrap();
        assert_eq!(back.sample, s.sample);
        assert_eq!(back.seed, Some(1));
        assert!(matches!(
            CubeSolution::load(&path, "other"),
            Err(Error::FingerprintMismatch { .. })
        ));
    }
}
