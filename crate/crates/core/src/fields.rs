//! Periodic coefficient fields and their unit-cell samples.
//!
//! Gallery fields are rescaled on construction so that their analytic lower
//! ellipticity bound is at least 1. The applied factor is kept in
//! [`CoefficientField::scale`]. Fields whose bound is already `≥ 1` are left
//! alone.
//!
//! Grid samples store one `d×d` matrix per cell, row-major within the matrix,
//! with cells in row-major order (last coordinate fastest).

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
enum Kind {
    Constant(Vec<Vec<f64>>),
    Laminate { mean: f64, amplitude: f64, axis: usize },
    Trig { mean: f64, amplitude: f64 },
    Rotating { lambda1: f64, lambda2: f64, skew: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientField {
    pub dim: usize,
    pub name: String,
    pub params: Value,
    /// Factor applied so the lower ellipticity bound is at least 1.
    pub scale: f64,
    kind: Kind,
}

fn param(params: &Value, key: &str, default: f64) -> Result<f64> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| Error::InvalidParameter(format!("`{key}` must be a number"))),
    }
}

fn param_usize(params: &Value, key: &str, default: usize) -> Result<usize> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| Error::InvalidParameter(format!("`{key}` must be a nonnegative integer"))),
    }
}

fn sym_eigs(m: &[Vec<f64>]) -> Vec<f64> {
    let d = m.len();
    let mat = DMatrix::from_fn(d, d, |i, j| 0.5 * (m[i][j] + m[j][i]));
    SymmetricEigen::new(mat).eigenvalues.iter().copied().collect()
}

fn op_norm(m: &[Vec<f64>]) -> f64 {
    let d = m.len();
    let mat = DMatrix::from_fn(d, d, |i, j| m[i][j]);
    mat.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Builds a gallery field.
///
/// | name | params | field |
/// |---|---|---|
/// | `constant` | `matrix` (d×d, default `Id`) | `a ≡ A` |
/// | `laminate1d` | `mean` (2), `amplitude` (1), `axis` (1-based, 1) | `(mean + amplitude·cos 2πx_axis)·Id` |
/// | `trig2d` | `mean` (2), `amplitude` (1) | `(mean + amplitude·cos 2πx₁ cos 2πx₂)·Id` |
/// | `rotating` | `lambda1` (1), `lambda2` (3), `skew` (0.5) | `R(2πx₁) diag(λ₁,λ₂) R(2πx₁)ᵀ + skew·sin(2πx₂)·J` |
///
/// `J` is the rotation by a quarter turn, so the skew part leaves the
/// symmetric part untouched.
pub fn gallery_field(name: &str, d: usize, params: &Value) -> Result<CoefficientField> {
    if d == 0 {
        return Err(Error::InvalidParameter("dimension must be positive".into()));
    }
    let (kind, lower) = match name {
        "constant" => {
            let a = match params.get("matrix") {
                None => (0..d)
                    .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect(),
                Some(v) => serde_json::from_value::<Vec<Vec<f64>>>(v.clone())?,
            };
            if a.len() != d || a.iter().any(|r| r.len() != d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: a.len(),
                });
            }
            let lower = sym_eigs(&a).into_iter().fold(f64::INFINITY, f64::min);
            (Kind::Constant(a), lower)
        }
        "laminate1d" => {
            let mean = param(params, "mean", 2.0)?;
            let amplitude = param(params, "amplitude", 1.0)?;
            let axis = param_usize(params, "axis", 1)?;
            if axis == 0 || axis > d {
                return Err(Error::InvalidParameter(format!("axis {axis} outside 1..={d}")));
            }
            (
                Kind::Laminate {
                    mean,
                    amplitude,
                    axis: axis - 1,
                },
                mean - amplitude.abs(),
            )
        }
        "trig2d" => {
            if d < 2 {
                return Err(Error::InvalidParameter("trig2d needs d ≥ 2".into()));
            }
            let mean = param(params, "mean", 2.0)?;
            let amplitude = param(params, "amplitude", 1.0)?;
            (Kind::Trig { mean, amplitude }, mean - amplitude.abs())
        }
        "rotating" => {
            if d != 2 {
                return Err(Error::InvalidParameter("rotating needs d = 2".into()));
            }
            let lambda1 = param(params, "lambda1", 1.0)?;
            let lambda2 = param(params, "lambda2", 3.0)?;
            let skew = param(params, "skew", 0.5)?;
            if !skew.is_finite() {
                return Err(Error::InvalidParameter("skew must be finite".into()));
            }
            (
                Kind::Rotating {
                    lambda1,
                    lambda2,
                    skew,
                },
                lambda1.min(lambda2),
            )
        }
        other => return Err(Error::UnknownField(other.to_string())),
    };
    if !(lower > 0.0) || !lower.is_finite() {
        return Err(Error::Ellipticity(format!(
            "field `{name}` has lower bound {lower}"
        )));
    }
    let scale = if lower < 1.0 { 1.0 / lower } else { 1.0 };
    Ok(CoefficientField {
        dim: d,
        name: name.to_string(),
        params: params.clone(),
        scale,
        kind,
    })
}

impl CoefficientField {
    /// `a(x)` for `x` in the unit cell; periodic in each coordinate.
    pub fn eval(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let d = self.dim;
        let diag = |s: f64| -> Vec<Vec<f64>> {
            (0..d)
                .map(|i| (0..d).map(|j| if i == j { s } else { 0.0 }).collect())
                .collect()
        };
        let raw = match &self.kind {
            Kind::Constant(a) => a.clone(),
            Kind::Laminate {
                mean,
                amplitude,
                axis,
            } => diag(mean + amplitude * (2.0 * PI * x[*axis]).cos()),
            Kind::Trig { mean, amplitude } => {
                diag(mean + amplitude * (2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).cos())
            }
            Kind::Rotating {
                lambda1,
                lambda2,
                skew,
            } => {
                let th = 2.0 * PI * x[0];
                let (c, s) = (th.cos(), th.sin());
                let k = skew * (2.0 * PI * x[1]).sin();
                vec![
                    vec![lambda1 * c * c + lambda2 * s * s, (lambda1 - lambda2) * c * s - k],
                    vec![(lambda1 - lambda2) * c * s + k, lambda1 * s * s + lambda2 * c * c],
                ]
            }
        };
        raw.into_iter()
            .map(|r| r.into_iter().map(|v| v * self.scale).collect())
            .collect()
    }

    /// Whether `a` is a scalar multiple of the identity everywhere.
    pub fn is_scalar(&self) -> bool {
        match &self.kind {
            Kind::Constant(a) => {
                let d = a.len();
                (0..d).all(|i| (0..d).all(|j| if i == j { a[i][i] == a[0][0] } else { a[i][j] == 0.0 }))
            }
            Kind::Laminate { .. } | Kind::Trig { .. } => true,
            Kind::Rotating { .. } => false,
        }
    }

    pub fn describe(&self) -> Value {
        json!({ "name": self.name, "d": self.dim, "params": self.params, "scale": self.scale })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub dim: usize,
    /// Cells per axis; `h = 1/N`.
    pub n: usize,
    /// `N^d` blocks of `d×d` values.
    pub values: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub symmetric: bool,
    /// Cell-wise scalar multiples of the identity.
    pub scalar: bool,
    pub label: String,
    pub fingerprint: String,
}

impl GridField {
    /// Builds a grid field from raw cell blocks, measuring bounds and fingerprint.
    pub fn from_values(dim: usize, n: usize, values: Vec<f64>, label: &str) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!("resolution {n} must be at least 2")));
        }
        let cells = n.pow(dim as u32);
        if values.len() != cells * dim * dim {
            return Err(Error::DimensionMismatch {
                expected: cells * dim * dim,
                found: values.len(),
            });
        }
        let mut g = GridField {
            dim,
            n,
            values,
            lambda_min: 0.0,
            lambda_max: 0.0,
            symmetric: true,
            scalar: true,
            label: label.to_string(),
            fingerprint: String::new(),
        };
        let (lo, hi) = ellipticity_bounds(&g)?;
        g.lambda_min = lo;
        g.lambda_max = hi;
        let dd = dim * dim;
        for c in 0..cells {
            let b = &g.values[c * dd..(c + 1) * dd];
            for i in 0..dim {
                for j in 0..dim {
                    if i != j && b[i * dim + j] != b[j * dim + i] {
                        g.symmetric = false;
                    }
                    if (i != j && b[i * dim + j] != 0.0) || (i == j && b[i * dim + i] != b[0]) {
                        g.scalar = false;
                    }
                }
            }
        }
        g.fingerprint = fingerprint(dim, n, &g.values);
        Ok(g)
    }

    pub fn cells(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// The `d×d` block of cell `c` (row-major).
    pub fn cell(&self, c: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.values[c * dd..(c + 1) * dd]
    }

    /// Cell-wise average of `a`.
    pub fn mean_matrix(&self) -> Vec<Vec<f64>> {
        let d = self.dim;
        let mut m = vec![vec![0.0; d]; d];
        for c in 0..self.cells() {
            let b = self.cell(c);
            for i in 0..d {
                for j in 0..d {
                    m[i][j] += b[i * d + j];
                }
            }
        }
        let s = self.cells() as f64;
        m.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v /= s));
        m
    }
}

/// SHA-256 of `(d, N, values)` as lowercase hex.
pub fn fingerprint(dim: usize, n: usize, values: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update((dim as u64).to_le_bytes());
    h.update((n as u64).to_le_bytes());
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Samples `f` at cell centers `(i + ½)/N`.
pub fn sample_field(f: &CoefficientField, n: usize) -> Result<GridField> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("resolution {n} must be at least 2")));
    }
    let d = f.dim;
    let cells = n.pow(d as u32);
    let mut values = Vec::with_capacity(cells * d * d);
    let mut x = vec![0.0; d];
    for c in 0..cells {
        let mut r = c;
        for k in (0..d).rev() {
            x[k] = ((r % n) as f64 + 0.5) / n as f64;
            r /= n;
        }
        for row in f.eval(&x) {
            values.extend(row);
        }
    }
    let label = format!("{}@{}", f.describe(), n);
    GridField::from_values(d, n, values, &label)
}

/// `(λ_min, Λ_est)`: smallest eigenvalue of the symmetric part and largest
/// operator norm over all cells.
pub fn ellipticity_bounds(g: &GridField) -> Result<(f64, f64)> {
    if g.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("coefficient field".into()));
    }
    let d = g.dim;
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for c in 0..g.cells() {
        let b = g.cell(c);
        let m: Vec<Vec<f64>> = (0..d).map(|i| b[i * d..(i + 1) * d].to_vec()).collect();
        lo = sym_eigs(&m).into_iter().fold(lo, f64::min);
        hi = hi.max(op_norm(&m));
    }
    Ok((lo, hi))
}

/// A field specification file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum FieldSpec {
    Grid { grid: GridSpec },
    Gallery {
        name: String,
        d: usize,
        #[serde(default)]
        params: Value,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GridSpec {
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub data_path: String,
}

impl FieldSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Resolves to a grid field at resolution `n`. Relative data paths are
    /// taken relative to `base`. Raw grids must already have resolution `n`.
    pub fn to_grid(&self, n: usize, base: Option<&Path>) -> Result<GridField> {
        match self {
            FieldSpec::Gallery { name, d, params } => {
                let params = if params.is_null() { json!({}) } else { params.clone() };
                sample_field(&gallery_field(name, *d, &params)?, n)
            }
            FieldSpec::Grid { grid } => {
                if grid.n != n {
                    return Err(Error::GridMismatch(format!(
                        "raw field has N = {}, requested {n}",
                        grid.n
                    )));
                }
                let p = Path::new(&grid.data_path);
                let p = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.to_path_buf(),
                };
                load_raw_grid(&p, grid.d, grid.n)
            }
        }
    }
}

/// Reads `N^d` little-endian `d×d` blocks in row-major cell order.
pub fn load_raw_grid(path: &Path, d: usize, n: usize) -> Result<GridField> {
    let bytes = std::fs::read(path)?;
    let expected = n.pow(d as u32) * d * d * 8;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    GridField::from_values(d, n, values, &format!("raw:{}", path.display()))
}

/// Writes a grid field in the raw layout read by [`load_raw_grid`].
pub fn save_raw_grid(path: &Path, g: &GridField) -> Result<()> {
    let bytes: Vec<u8> = g.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_identity() {
        let f = gallery_field("constant", 2, &json!({})).unwrap();
        assert_eq!(f.eval(&[0.3, 0.9]), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let g = sample_field(&f, 8).unwrap();
        assert!(g.values.chunks(4).all(|b| b == [1.0, 0.0, 0.0, 1.0]));
        assert_eq!((g.lambda_min, g.lambda_max), (1.0, 1.0));
        assert!(g.symmetric && g.scalar);
    }

    #[test]
    fn constant_two_identity_bounds() {
        let f = gallery_field("constant", 2, &json!({"matrix": [[2.0, 0.0], [0.0, 2.0]]})).unwrap();
        let g = sample_field(&f, 4).unwrap();
        let (lo, hi) = ellipticity_bounds(&g).unwrap();
        assert!((lo - 2.0).abs() < 1e-15 && (hi - 2.0).abs() < 1e-15);
        assert_eq!(f.scale, 1.0);
    }

    #[test]
    fn laminate_bounds() {
        let f = gallery_field("laminate1d", 1, &json!({"mean": 2.0, "amplitude": 1.0, "axis": 1})).unwrap();
        assert!((f.eval(&[0.0])[0][0] - 3.0).abs() < 1e-15);
        let g = sample_field(&f, 512).unwrap();
        assert!(g.lambda_min >= 1.0 && g.lambda_max <= 3.0);
        // midpoint offset: the extreme cells sit half a cell from the extrema
        let off = 1.0 - (PI / 512.0).cos();
        assert!((g.lambda_min - (1.0 + off)).abs() < 1e-12);
        assert!((g.lambda_max - (3.0 - off)).abs() < 1e-12);
    }

    #[test]
    fn laminate_resolution_consistency() {
        let f = gallery_field("laminate1d", 1, &json!({})).unwrap();
        let a = sample_field(&f, 64).unwrap().lambda_min;
        let b = sample_field(&f, 512).unwrap().lambda_min;
        // modulus of continuity of cos over half a coarse cell
        let omega = 2.0 * PI * 0.5 / 64.0;
        assert!((a - b).abs() <= omega);
    }

    #[test]
    fn trig_lower_bound() {
        let f = gallery_field("trig2d", 2, &json!({"amplitude": 1.0})).unwrap();
        let g = sample_field(&f, 32).unwrap();
        assert!(g.lambda_min >= 1.0);
        assert!(g.lambda_max <= 3.0);
    }

    #[test]
    fn rotating_skew_does_not_change_symmetric_part() {
        let a = gallery_field("rotating", 2, &json!({"skew": 0.0})).unwrap();
        let b = gallery_field("rotating", 2, &json!({"skew": 0.8})).unwrap();
        let ga = sample_field(&a, 16).unwrap();
        let gb = sample_field(&b, 16).unwrap();
        assert!((ga.lambda_min - gb.lambda_min).abs() < 1e-12);
        assert!(ga.symmetric && !gb.symmetric && !gb.scalar);
        assert!((ga.lambda_min - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_rescales_weak_fields() {
        let f = gallery_field("trig2d", 2, &json!({"mean": 1.0, "amplitude": 0.5})).unwrap();
        assert!((f.scale - 2.0).abs() < 1e-15);
        let g = sample_field(&f, 16).unwrap();
        assert!(g.lambda_min >= 1.0 - 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            gallery_field("checkerboard", 2, &json!({})),
            Err(Error::UnknownField(_))
        ));
        assert!(matches!(
            gallery_field("laminate1d", 1, &json!({"mean": 1.0, "amplitude": 1.0})),
            Err(Error::Ellipticity(_))
        ));
        assert!(gallery_field("laminate1d", 1, &json!({"axis": 2})).is_err());
        let f = gallery_field("constant", 1, &json!({})).unwrap();
        assert!(sample_field(&f, 1).is_err());
        let mut g = sample_field(&f, 4).unwrap();
        g.values[2] = f64::NAN;
        assert!(matches!(ellipticity_bounds(&g), Err(Error::NonFinite(_))));
    }

    #[test]
    fn every_gallery_field_has_unit_lower_bound() {
        for (name, d) in [("constant", 2), ("laminate1d", 2), ("trig2d", 2), ("rotating", 2)] {
            let f = gallery_field(name, d, &json!({})).unwrap();
            let g = sample_field(&f, 32).unwrap();
            assert!(g.lambda_min >= 1.0 - 1e-12, "{name}: {}", g.lambda_min);
        }
    }

    #[test]
    fn spec_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = gallery_field("trig2d", 2, &json!({})).unwrap();
        let g = sample_field(&f, 8).unwrap();
        save_raw_grid(&dir.path().join("a.bin"), &g).unwrap();
        let spec: FieldSpec =
            serde_json::from_str(r#"{"grid": {"N": 8, "d": 2, "data_path": "a.bin"}}"#).unwrap();
        let back = spec.to_grid(8, Some(dir.path())).unwrap();
        assert_eq!(back.values, g.values);
        assert_eq!(back.fingerprint, g.fingerprint);
        assert!(spec.to_grid(16, Some(dir.path())).is_err());

        let spec: FieldSpec =
            serde_json::from_str(r#"{"name": "trig2d", "d": 2, "params": {}}"#).unwrap();
        assert_eq!(spec.to_grid(8, None).unwrap().fingerprint, g.fingerprint);
    }
}
