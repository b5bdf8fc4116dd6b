//! Q1 finite elements on uniform grids with a cell-wise constant coefficient.
//!
//! Degrees of freedom sit at grid vertices. Element integrals use the
//! tensor two-point Gauss rule, which is exact for the Q1 stiffness with a
//! constant coefficient per cell. Flat indices are row-major with the last
//! coordinate fastest. Local vertex and Gauss-point labels use bit `k` for
//! axis `k`.

use crate::fields::GridField;

pub(crate) const MAX_DIM: usize = 3;

/// Reference Q1 tables on the unit cell.
#[derive(Clone, Debug)]
pub(crate) struct Q1 {
    /// `2^d`, both vertices and Gauss points.
    pub nv: usize,
    /// `val[g * nv + e]`.
    pub val: Vec<f64>,
    /// `grad[(g * nv + e) * d + k]`, derivative in reference coordinates.
    pub grad: Vec<f64>,
}

impl Q1 {
    pub fn new(d: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&d), "dimension {d} unsupported");
        let nv = 1 << d;
        let s = 0.5 / 3f64.sqrt();
        let mut pts = vec![0.0; nv * d];
        for g in 0..nv {
            for k in 0..d {
                pts[g * d + k] = if (g >> k) & 1 == 1 { 0.5 + s } else { 0.5 - s };
            }
        }
        let mut val = vec![0.0; nv * nv];
        let mut grad = vec![0.0; nv * nv * d];
        for g in 0..nv {
            for e in 0..nv {
                let f = |k: usize| {
                    let x = pts[g * d + k];
                    if (e >> k) & 1 == 1 {
                        x
                    } else {
                        1.0 - x
                    }
                };
                val[g * nv + e] = (0..d).map(f).product();
                for k in 0..d {
                    let sign = if (e >> k) & 1 == 1 { 1.0 } else { -1.0 };
                    let rest: f64 = (0..d).filter(|&l| l != k).map(f).product();
                    grad[(g * nv + e) * d + k] = sign * rest;
                }
            }
        }
        Q1 { nv, val, grad }
    }
}

/// Element stiffness matrices `E_c[e][e'] = ∫_c ∇v_e · a_c ∇v_{e'}`, one per
/// periodic cell.
pub(crate) fn element_matrices(field: &GridField, q: &Q1) -> Vec<f64> {
    let d = field.dim;
    let nv = q.nv;
    let h = field.h();
    let wscale = h.powi(d as i32 - 2) / nv as f64;
    let mut out = vec![0.0; field.cells() * nv * nv];
    for c in 0..field.cells() {
        let a = field.cell(c);
        let m = &mut out[c * nv * nv..(c + 1) * nv * nv];
        for g in 0..nv {
            for e in 0..nv {
                let ge = &q.grad[(g * nv + e) * d..(g * nv + e + 1) * d];
                for f in 0..nv {
                    let gf = &q.grad[(g * nv + f) * d..(g * nv + f + 1) * d];
                    let mut s = 0.0;
                    for k in 0..d {
                        for l in 0..d {
                            s += ge[k] * a[k * d + l] * gf[l];
                        }
                    }
                    m[e * nv + f] += wscale * s;
                }
            }
        }
    }
    out
}

/// Number of stencil offsets, `3^d`.
pub(crate) fn n_offsets(d: usize) -> usize {
    3usize.pow(d as u32)
}

/// Offset `o` as a vector in `{−1, 0, 1}^d`, row-major.
pub(crate) fn offset(d: usize, o: usize) -> [isize; MAX_DIM] {
    let mut out = [0isize; MAX_DIM];
    let mut r = o;
    for k in (0..d).rev() {
        out[k] = (r % 3) as isize - 1;
        r /= 3;
    }
    out
}

pub(crate) fn unflatten(idx: usize, n: usize, d: usize) -> [usize; MAX_DIM] {
    let mut out = [0usize; MAX_DIM];
    let mut r = idx;
    for k in (0..d).rev() {
        out[k] = r % n;
        r /= n;
    }
    out
}

pub(crate) fn flatten(c: &[usize], n: usize, d: usize) -> usize {
    let mut idx = 0;
    for &ck in c.iter().take(d) {
        idx = idx * n + ck;
    }
    idx
}

/// 3^d stencils of the assembled Q1 operator, indexed by periodic node key.
#[derive(Clone, Debug)]
pub(crate) struct PeriodicStencil {
    pub d: usize,
    pub n: usize,
    /// `coeffs[t * 3^d + o]`.
    pub coeffs: Vec<f64>,
}

impl PeriodicStencil {
    pub fn build(field: &GridField, q: &Q1) -> Self {
        let d = field.dim;
        let n = field.n;
        let nv = q.nv;
        let no = n_offsets(d);
        let em = element_matrices(field, q);
        let mut coeffs = vec![0.0; field.cells() * no];
        for t in 0..field.cells() {
            let tc = unflatten(t, n, d);
            for eps in 0..nv {
                // cell whose vertex `eps` is node t
                let mut cc = [0usize; MAX_DIM];
                for k in 0..d {
                    cc[k] = (tc[k] + n - ((eps >> k) & 1)) % n;
                }
                let c = flatten(&cc, n, d);
                for f in 0..nv {
                    let mut o = 0;
                    for k in 0..d {
                        let delta = ((f >> k) & 1) as isize - ((eps >> k) & 1) as isize;
                        o = o * 3 + (delta + 1) as usize;
                    }
                    coeffs[t * no + o] += em[c * nv * nv + eps * nv + f];
                }
            }
        }
        PeriodicStencil { d, n, coeffs }
    }

    #[cfg(test)]
    pub fn stencil(&self, t: usize) -> &[f64] {
        let no = n_offsets(self.d);
        &self.coeffs[t * no..(t + 1) * no]
    }
}

/// Neighbor table of the periodic node grid, `nbr[t * 3^d + o]`.
pub(crate) fn torus_neighbors(n: usize, d: usize) -> Vec<usize> {
    let no = n_offsets(d);
    let total = n.pow(d as u32);
    let mut out = vec![0usize; total * no];
    for t in 0..total {
        let tc = unflatten(t, n, d);
        for o in 0..no {
            let off = offset(d, o);
            let mut c = [0usize; MAX_DIM];
            for k in 0..d {
                c[k] = ((tc[k] as isize + off[k]).rem_euclid(n as isize)) as usize;
            }
            out[t * no + o] = flatten(&c, n, d);
        }
    }
    out
}

/// The assembled periodic operator on the unit torus.
#[derive(Clone, Debug)]
pub(crate) struct TorusOperator {
    pub stencil: PeriodicStencil,
    pub nbr: Vec<usize>,
}

impl TorusOperator {
    pub fn new(field: &GridField, q: &Q1) -> Self {
        TorusOperator {
            stencil: PeriodicStencil::build(field, q),
            nbr: torus_neighbors(field.n, field.dim),
        }
    }

    pub fn len(&self) -> usize {
        self.stencil.n.pow(self.stencil.d as u32)
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let no = n_offsets(self.stencil.d);
        for (t, yt) in y.iter_mut().enumerate() {
            let s = &self.stencil.coeffs[t * no..(t + 1) * no];
            let nb = &self.nbr[t * no..(t + 1) * no];
            let mut acc = 0.0;
            for o in 0..no {
                acc += s[o] * x[nb[o]];
            }
            *yt = acc;
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        let no = n_offsets(self.stencil.d);
        let center = no / 2;
        (0..self.len())
            .map(|t| self.stencil.coeffs[t * no + center])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{gallery_field, sample_field};
    use serde_json::json;

    #[test]
    fn reference_tables_partition_unity() {
        for d in 1..=3 {
            let q = Q1::new(d);
            for g in 0..q.nv {
                let s: f64 = (0..q.nv).map(|e| q.val[g * q.nv + e]).sum();
                assert!((s - 1.0).abs() < 1e-15);
                for k in 0..d {
                    let s: f64 = (0..q.nv).map(|e| q.grad[(g * q.nv + e) * d + k]).sum();
                    assert!(s.abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn laplace_stencil_in_two_dimensions() {
        // classical Q1 stencil (1/3)[8, −1 × 8]
        let f = gallery_field("constant", 2, &json!({})).unwrap();
        let g = sample_field(&f, 4).unwrap();
        let s = PeriodicStencil::build(&g, &Q1::new(2));
        for (o, v) in s.stencil(5).iter().enumerate() {
            let expected = if o == 4 { 8.0 / 3.0 } else { -1.0 / 3.0 };
            assert!((v - expected).abs() < 1e-14, "o={o} v={v}");
        }
    }

    #[test]
    fn laplace_stencil_in_one_dimension() {
        let f = gallery_field("constant", 1, &json!({})).unwrap();
        let g = sample_field(&f, 8).unwrap();
        let s = PeriodicStencil::build(&g, &Q1::new(1));
        let st = s.stencil(3);
        assert!((st[0] + 8.0).abs() < 1e-13 && (st[1] - 16.0).abs() < 1e-13 && (st[2] + 8.0).abs() < 1e-13);
    }

    #[test]
    fn stencil_rows_sum_to_zero() {
        let f = gallery_field("rotating", 2, &json!({})).unwrap();
        let g = sample_field(&f, 6).unwrap();
        let s = PeriodicStencil::build(&g, &Q1::new(2));
        for t in 0..g.cells() {
            let sum: f64 = s.stencil(t).iter().sum();
            assert!(sum.abs() < 1e-13);
        }
    }
}
