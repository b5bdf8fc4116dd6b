//! Experiment configuration, drivers, reports and caches.
//!
//! Every driver takes an [`ExperimentConfig`] and a [`SolutionStore`]; the
//! store shares cube solutions between experiments and, with a cache
//! directory, across runs. Reports are plain data with a provenance block and
//! serialize to JSON and CSV. Identical configurations give byte-identical
//! reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::cell::{build_hierarchy, corrector_residual, homogenized_matrix, CancellationRecord, CellOptions, CorrectorHierarchy};
use crate::container::{Container, MAGIC};
use crate::cubesolver::{
    boundary_random, lattice_difference_norm, lp_norm, solve_with_operator, CubeOperator, CubeProblem, CubeSample,
    CubeSolution, Region, SolverOptions,
};
use crate::error::{Error, Result};
use crate::fields::{FieldSpec, GridField};
use crate::hetpoly::{basis_harmonic_het, evaluate_het, fit_het, solve_het_rhs, HetPolynomial};
use crate::polynomials::{apply_macroscopic, harmonic_basis, Polynomial};
use crate::tensors::multi_indices;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    /// Seeded normal samples on the boundary nodes, smoothed once.
    Random,
    /// Random combinations of ā-harmonic polynomials of degree ≤ m.
    Harmonic,
    /// Random combinations of a basis of `A_m^0`.
    HetHarmonic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    pub cell: f64,
    pub cube: f64,
    pub cancellation: f64,
    /// Accepted corrector-equation residual in the corrector report.
    pub residual: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            cell: 1e-10,
            cube: 1e-10,
            cancellation: 1e-8,
            residual: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Windows {
    /// Accepted distance of a fitted slope from its target.
    pub slope: f64,
    /// Accepted `E(r)` for exact members of `A_m^0`.
    pub control: f64,
}

impl Default for Windows {
    fn default() -> Self {
        Windows {
            slope: 0.3,
            control: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThreeBallConfig {
    pub radius: usize,
    pub seeds: usize,
    pub alphas: Vec<f64>,
    /// Radii `(r, s, R)` of balls.
    pub ball_chains: Vec<[f64; 3]>,
    /// Sides `(r, s, R)` of cubes.
    pub cube_chains: Vec<[f64; 3]>,
}

impl Default for ThreeBallConfig {
    fn default() -> Self {
        ThreeBallConfig {
            radius: 64,
            seeds: 20,
            alphas: vec![0.1, 0.2, 0.3, 0.4],
            ball_chains: vec![[2.0, 8.0, 32.0]],
            cube_chains: vec![[4.0, 16.0, 64.0]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputPaths {
    pub out: String,
    pub cache_dir: Option<String>,
}

impl Default for OutputPaths {
    fn default() -> Self {
        OutputPaths {
            out: "reports".into(),
            cache_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub field: FieldSpec,
    #[serde(rename = "N")]
    pub n: usize,
    /// Hierarchy order.
    #[serde(rename = "M")]
    pub order: usize,
    pub radii: Vec<usize>,
    pub degrees: Vec<usize>,
    pub diff_orders: Vec<usize>,
    /// Number of boundary seeds, counted from `seed`.
    pub seeds: usize,
    pub seed: u64,
    pub boundary: BoundaryKind,
    /// Minimal-scale multiplier: fits use `r ≥ c_min · m`.
    pub c_min: f64,
    /// Smallest tabulated radius.
    pub r_floor: usize,
    /// Alternative `c_min` values for the sensitivity table.
    pub sensitivity: Vec<f64>,
    /// Also tabulate the error of the fit projected onto `A_m^0`.
    pub post_correct: bool,
    pub tolerances: Tolerances,
    pub windows: Windows,
    pub three_ball: ThreeBallConfig,
    pub output: OutputPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            field: FieldSpec::Gallery {
                name: "trig2d".into(),
                d: 2,
                params: json!({}),
            },
            n: 32,
            order: 4,
            radii: vec![16, 32, 64],
            degrees: vec![0, 1, 2],
            diff_orders: vec![1, 2, 3],
            seeds: 10,
            seed: 0,
            boundary: BoundaryKind::Random,
            c_min: 4.0,
            r_floor: 2,
            sensitivity: vec![2.0, 3.0, 4.0, 5.0, 6.0],
            post_correct: false,
            tolerances: Tolerances::default(),
            windows: Windows::default(),
            three_ball: ThreeBallConfig::default(),
            output: OutputPaths::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON or TOML document (by extension; JSON otherwise).
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = if path.extension().and_then(|e| e.to_str()) == Some("toml") {
            toml::from_str(&text)?
        } else {
            serde_json::from_str(&text)?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n % 2 != 0 || self.n < 2 {
            return Err(Error::InvalidParameter(format!("N = {} must be even", self.n)));
        }
        if self.order == 0 {
            return Err(Error::InvalidParameter("M must be at least 1".into()));
        }
        let mmax = self.degrees.iter().copied().max().unwrap_or(0);
        if mmax > self.order {
            return Err(Error::OrderExceedsHierarchy {
                requested: mmax,
                available: self.order,
            });
        }
        for &r in &self.radii {
            if (r as f64) < self.c_min * mmax as f64 {
                return Err(Error::InvalidParameter(format!(
                    "radius {r} is below c_min · m = {}",
                    self.c_min * mmax as f64
                )));
            }
        }
        if !(self.c_min > 0.0) {
            return Err(Error::InvalidParameter("c_min must be positive".into()));
        }
        for a in &self.three_ball.alphas {
            if !(*a > 0.0 && *a < 0.5) {
                return Err(Error::InvalidParameter(format!("α = {a} is outside (0, 1/2)")));
            }
        }
        for c in self.three_ball.ball_chains.iter().chain(&self.three_ball.cube_chains) {
            if ((c[0] / c[1]) - (c[1] / c[2])).abs() > 1e-12 || !(c[0] < c[1] && c[1] < c[2]) {
                return Err(Error::InvalidParameter(format!("{c:?} is not a geometric chain")));
            }
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn grid_field(&self, base: Option<&Path>) -> Result<GridField> {
        self.field.to_grid(self.n, base)
    }

    pub fn cell_options(&self) -> CellOptions {
        CellOptions {
            tol: self.tolerances.cell,
            cancellation_tol: self.tolerances.cancellation,
            ..CellOptions::default()
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tolerances.cube,
            ..SolverOptions::default()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let d = Sha256::digest(&bytes);
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub field: String,
    pub fingerprint: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub order: usize,
    pub tolerances: Tolerances,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub code_version: String,
    pub config_digest: String,
}

fn provenance(cfg: &ExperimentConfig, g: &GridField) -> Provenance {
    Provenance {
        field: g.label.clone(),
        fingerprint: g.fingerprint.clone(),
        n: g.n,
        order: cfg.order,
        tolerances: cfg.tolerances.clone(),
        lambda_min: g.lambda_min,
        lambda_max: g.lambda_max,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config_digest: cfg.digest(),
    }
}

/// Least squares line `y ≈ a + b x`, returned as `(b, a)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    Some((b, my - b * mx))
}

/// Common slope of several groups, each with its own intercept.
pub fn pooled_slope(groups: &[(Vec<f64>, Vec<f64>)]) -> Option<f64> {
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in groups {
        if x.len() < 2 {
            continue;
        }
        let mx = x.iter().sum::<f64>() / x.len() as f64;
        let my = y.iter().sum::<f64>() / y.len() as f64;
        sxx += x.iter().map(|v| (v - mx).powi(2)).sum::<f64>();
        sxy += x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>();
    }
    if sxx > 0.0 {
        Some(sxy / sxx)
    } else {
        None
    }
}

/// Hierarchy cache file name.
pub fn hierarchy_cache_path(dir: &Path, fingerprint: &str, order: usize) -> PathBuf {
    let fp: String = fingerprint.chars().take(16).collect();
    dir.join(format!("hierarchy-{fp}-M{order}.bin"))
}

/// Builds a hierarchy, or reloads it from the cache directory.
pub fn load_or_build_hierarchy(
    g: &GridField,
    order: usize,
    opts: CellOptions,
    cache_dir: Option<&Path>,
) -> Result<Arc<CorrectorHierarchy>> {
    if let Some(dir) = cache_dir {
        let path = hierarchy_cache_path(dir, &g.fingerprint, order);
        if path.exists() {
            return Ok(Arc::new(CorrectorHierarchy::load(&path, g)?));
        }
        let h = build_hierarchy(g, order, opts)?;
        h.save(&path)?;
        return Ok(Arc::new(h));
    }
    Ok(Arc::new(build_hierarchy(g, order, opts)?))
}

type SolutionKey = (String, usize, String);

/// Cube solutions shared across experiments, in memory and optionally on disk.
#[derive(Default)]
pub struct SolutionStore {
    cache_dir: Option<PathBuf>,
    solutions: Mutex<BTreeMap<SolutionKey, Arc<CubeSolution>>>,
    operators: Mutex<BTreeMap<(String, usize), Arc<CubeOperator>>>,
}

impl SolutionStore {
    pub fn new(cache_dir: Option<PathBuf>) -> Self {
        SolutionStore {
            cache_dir,
            ..SolutionStore::default()
        }
    }

    pub fn cache_dir(&self) -> Option<&Path> {
        self.cache_dir.as_deref()
    }

    fn operator(&self, g: &GridField, r: usize, opts: SolverOptions) -> Result<Arc<CubeOperator>> {
        let key = (g.fingerprint.clone(), r);
        if let Some(op) = self.operators.lock().expect("lock").get(&key) {
            return Ok(op.clone());
        }
        let op = Arc::new(CubeOperator::new(g, r, opts.smoothing)?);
        let mut ops = self.operators.lock().expect("lock");
        // keep one operator per field to bound memory
        ops.retain(|k, _| k.0 == key.0 && k.1 == r);
        ops.insert(key, op.clone());
        Ok(op)
    }

    /// Returns the solution labelled `label` on `Q_r`, solving on first use.
    pub fn get(
        &self,
        g: &GridField,
        r: usize,
        label: &str,
        seed: Option<u64>,
        opts: SolverOptions,
        boundary: impl FnOnce() -> Result<CubeSample>,
    ) -> Result<Arc<CubeSolution>> {
        let key = (g.fingerprint.clone(), r, label.to_string());
        if let Some(s) = self.solutions.lock().expect("lock").get(&key) {
            return Ok(s.clone());
        }
        let path = self
            .cache_dir
            .as_ref()
            .map(|d| CubeSolution::cache_path(d, &g.fingerprint, r, label));
        let sol = match &path {
            Some(p) if p.exists() => CubeSolution::load(p, &g.fingerprint)?,
            _ => {
                let mut prob = CubeProblem::new(g, boundary()?, label)?;
                prob.seed = seed;
                let op = self.operator(g, r, opts)?;
                let s = solve_with_operator(&prob, &op, opts)?;
                if let Some(p) = &path {
                    s.save(p)?;
                }
                s
            }
        };
        let sol = Arc::new(sol);
        self.solutions.lock().expect("lock").insert(key, sol.clone());
        Ok(sol)
    }
}

fn normal_coefficients(count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Boundary data for a solution with the given kind, degree and seed.
fn boundary_for(
    kind: BoundaryKind,
    h: &Arc<CorrectorHierarchy>,
    r: usize,
    m: usize,
    seed: u64,
) -> Result<CubeSample> {
    let d = h.dim();
    let n = h.n();
    match kind {
        BoundaryKind::Random => boundary_random(d, n, r, seed),
        BoundaryKind::Harmonic => {
            let basis = harmonic_basis(d, m, h.abar.abar())?;
            let c = normal_coefficients(basis.len(), seed);
            let mut p = Polynomial::zero(d);
            for (b, ci) in basis.iter().zip(c) {
                p = p.add(&b.scale(ci));
            }
            CubeSample::from_polynomial(n, r, &p)
        }
        BoundaryKind::HetHarmonic => {
            let basis = basis_harmonic_het(h, m)?;
            let c = normal_coefficients(basis.len(), seed);
            let mut q = Polynomial::zero(d);
            for (b, ci) in basis.iter().zip(c) {
                q = q.add(&b.q.scale(ci));
            }
            evaluate_het(&HetPolynomial::new(h.clone(), q)?, r)
        }
    }
}

fn boundary_label(kind: BoundaryKind, m: usize, seed: u64) -> String {
    match kind {
        BoundaryKind::Random => format!("random-s{seed}"),
        BoundaryKind::Harmonic => format!("harmonic-m{m}-s{seed}"),
        BoundaryKind::HetHarmonic => format!("het-m{m}-s{seed}"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRow {
    pub order: usize,
    pub coeffs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub monomial: String,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    /// `v_k = ‖∇φ^(k)‖_{L²(Q₁)} + |ā^(k)|` for `k = 1..M`.
    pub values: Vec<f64>,
    /// `max_k (v_k + 1)^{1/k}`, so `log(v_k + 1) ≤ k log C_fit`.
    pub c_fit: f64,
    /// Least squares slope and intercept of `log(v_k + 1)` against `k`.
    pub log_slope: Option<f64>,
    pub log_intercept: Option<f64>,
    /// Largest second difference of `log(v_k + 1)`.
    pub max_curvature: Option<f64>,
}

/// `C_fit` and its log-linear companion fit for a growth sequence.
pub fn growth_fit(values: &[f64]) -> GrowthFit {
    let logs: Vec<f64> = values.iter().map(|v| (v + 1.0).ln()).collect();
    let c_fit = logs
        .iter()
        .enumerate()
        .map(|(i, l)| (l / (i + 1) as f64).exp())
        .fold(1.0, f64::max);
    let ks: Vec<f64> = (1..=values.len()).map(|k| k as f64).collect();
    let fit = fit_line(&ks, &logs);
    let max_curvature = logs
        .windows(3)
        .map(|w| w[2] - 2.0 * w[1] + w[0])
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    GrowthFit {
        values: values.to_vec(),
        c_fit,
        log_slope: fit.map(|f| f.0),
        log_intercept: fit.map(|f| f.1),
        max_curvature,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectorReport {
    pub provenance: Provenance,
    pub abar: Vec<TensorRow>,
    pub homogenized_matrix: Vec<Vec<f64>>,
    pub abar_cross_check: f64,
    pub abar_eigenvalues: Vec<f64>,
    /// `‖φ^(k)‖_{L²(Q₁)}`, `k = 1..M`.
    pub corrector_norms: Vec<f64>,
    pub gradient_norms: Vec<f64>,
    /// `|ā^(k)|`, `k = 1..M` (zero for `k = 1`).
    pub abar_norms: Vec<f64>,
    pub max_corrector_mean: f64,
    pub residuals: Vec<ResidualRow>,
    pub max_residual: f64,
    pub cancellation: Vec<CancellationRecord>,
    pub max_cancellation: f64,
    pub total_iterations: usize,
    pub growth: GrowthFit,
    pub pass: bool,
}

pub fn run_corrector_report(cfg: &ExperimentConfig, store: &SolutionStore) -> Result<CorrectorReport> {
    cfg.validate()?;
    let g = cfg.grid_field(None)?;
    let h = load_or_build_hierarchy(&g, cfg.order, cfg.cell_options(), store.cache_dir())?;
    corrector_report(cfg, &g, &h)
}

/// The corrector report of an existing hierarchy.
pub fn corrector_report(cfg: &ExperimentConfig, g: &GridField, h: &CorrectorHierarchy) -> Result<CorrectorReport> {
    let d = g.dim;
    let m = h.order;
    let abar = h
        .abar
        .tensors()
        .iter()
        .map(|t| TensorRow {
            order: t.order(),
            coeffs: t.coeffs().to_vec(),
        })
        .collect();
    let hm = homogenized_matrix(h)?.to_matrix();
    let sym = nalgebra::DMatrix::from_fn(d, d, |i, j| h.abar.abar().to_matrix()[i][j]);
    let mut eigs: Vec<f64> = nalgebra::SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    eigs.sort_by(|a, b| a.total_cmp(b));
    let corrector_norms: Vec<f64> = (1..=m).map(|k| h.corrector_norm(k)).collect();
    let gradient_norms: Vec<f64> = (1..=m).map(|k| h.gradient_norm(k)).collect();
    let abar_norms: Vec<f64> = (1..=m).map(|k| h.abar.get(k).map_or(0.0, |t| t.norm())).collect();
    let max_mean = (1..=m)
        .flat_map(|k| (0..h.phi[k].components()).map(move |i| (k, i)))
        .map(|(k, i)| h.phi[k].mean(i).abs())
        .fold(0.0, f64::max);
    let mut residuals = Vec::new();
    for k in 0..=m {
        for a in multi_indices(d, k) {
            let p = Polynomial::monomial(&a, 1.0);
            residuals.push(ResidualRow {
                monomial: a.to_string(),
                residual: corrector_residual(h, &p)?,
            });
        }
    }
    let max_residual = residuals.iter().map(|r| r.residual).fold(0.0, f64::max);
    let max_cancellation = h.meta.cancellation.iter().map(|c| c.ratio).fold(0.0, f64::max);
    let values: Vec<f64> = gradient_norms.iter().zip(&abar_norms).map(|(a, b)| a + b).collect();
    let growth = growth_fit(&values);
    let pass = max_cancellation <= cfg.tolerances.cancellation
        && max_residual <= cfg.tolerances.residual
        && growth.c_fit.is_finite();
    Ok(CorrectorReport {
        provenance: provenance(cfg, g),
        abar,
        homogenized_matrix: hm,
        abar_cross_check: h.meta.abar_cross_check,
        abar_eigenvalues: eigs,
        corrector_norms,
        gradient_norms,
        abar_norms,
        max_corrector_mean: max_mean,
        residuals,
        max_residual,
        cancellation: h.meta.cancellation.clone(),
        max_cancellation,
        total_iterations: h.meta.solves.iter().map(|s| s.iterations).sum(),
        growth,
        pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayEntry {
    pub m: usize,
    pub radius: usize,
    pub seed: u64,
    pub boundary: String,
    pub norm_big: f64,
    pub r: Vec<usize>,
    /// `E(r) = ‖u − ψ‖_{L²(Q_r)} / ‖u‖_{L²(Q_R)}`.
    pub e: Vec<f64>,
    /// Fit over the configured window.
    pub slope: Option<f64>,
    /// `C` in `E(r) ≈ (C r / R)^{m+1}`.
    pub prefactor: Option<f64>,
    /// `E(r)` for the fit corrected into `A_m^0`, when requested.
    pub e_corrected: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledSlope {
    pub m: usize,
    pub c_min: f64,
    pub target: f64,
    pub slope: Option<f64>,
    pub groups: usize,
    pub points: usize,
    pub within_window: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedRatioRow {
    pub m: usize,
    pub radius: usize,
    pub seed: u64,
    pub r: usize,
    pub e: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub provenance: Provenance,
    pub boundary: BoundaryKind,
    pub c_min: f64,
    pub slope_window: f64,
    pub entries: Vec<DecayEntry>,
    pub pooled: Vec<PooledSlope>,
    /// Error at the fixed ratio `r = R/4` against `R`.
    pub fixed_ratio: Vec<FixedRatioRow>,
    pub sensitivity: Vec<PooledSlope>,
    /// Largest `E(r)` when the boundary data lie in `A_m^0`.
    pub max_control_error: Option<f64>,
    pub pass: bool,
}

fn window_points(entry: &DecayEntry, c_min: f64) -> (Vec<f64>, Vec<f64>) {
    let lo = c_min * entry.m as f64;
    entry
        .r
        .iter()
        .zip(&entry.e)
        .filter(|(r, e)| **r as f64 >= lo - 1e-12 && **e > 0.0)
        .map(|(r, e)| ((*r as f64).ln(), e.ln()))
        .unzip()
}

fn pooled_for(entries: &[DecayEntry], m: usize, c_min: f64, window: f64) -> PooledSlope {
    let groups: Vec<(Vec<f64>, Vec<f64>)> = entries
        .iter()
        .filter(|e| e.m == m)
        .map(|e| window_points(e, c_min))
        .filter(|g| g.0.len() >= 2)
        .collect();
    let slope = pooled_slope(&groups);
    let target = (m + 1) as f64;
    PooledSlope {
        m,
        c_min,
        target,
        slope,
        groups: groups.len(),
        points: groups.iter().map(|g| g.0.len()).sum(),
        within_window: slope.is_some_and(|s| (s - target).abs() <= window),
    }
}

pub fn run_analyticity(cfg: &ExperimentConfig, store: &SolutionStore) -> Result<DecayReport> {
    cfg.validate()?;
    let g = cfg.grid_field(None)?;
    let h = load_or_build_hierarchy(&g, cfg.order, cfg.cell_options(), store.cache_dir())?;
    let opts = cfg.solver_options();
    let mut jobs = Vec::new();
    for &r in &cfg.radii {
        for seed in cfg.seed_list() {
            for &m in &cfg.degrees {
                jobs.push((r, seed, m));
            }
        }
    }
    let entries: Vec<DecayEntry> = jobs
        .par_iter()
        .map(|&(r, seed, m)| {
            let label = boundary_label(cfg.boundary, m, seed);
            let sol = store.get(&g, r, &label, Some(seed), opts, || boundary_for(cfg.boundary, &h, r, m, seed))?;
            decay_entry(cfg, &h, &sol, m)
        })
        .collect::<Result<_>>()?;
    let pooled: Vec<PooledSlope> = cfg
        .degrees
        .iter()
        .map(|&m| pooled_for(&entries, m, cfg.c_min, cfg.windows.slope))
        .collect();
    let mut sensitivity = Vec::new();
    for &c in &cfg.sensitivity {
        for &m in &cfg.degrees {
            sensitivity.push(pooled_for(&entries, m, c, cfg.windows.slope));
        }
    }
    let fixed_ratio = entries
        .iter()
        .filter_map(|e| {
            let last = *e.r.last()?;
            Some(FixedRatioRow {
                m: e.m,
                radius: e.radius,
                seed: e.seed,
                r: last,
                e: *e.e.last()?,
            })
        })
        .collect();
    let (max_control_error, pass) = match cfg.boundary {
        BoundaryKind::Random => (None, pooled.iter().all(|p| p.within_window)),
        _ => {
            let worst = entries.iter().flat_map(|e| e.e.iter().copied()).fold(0.0, f64::max);
            (Some(worst), worst <= cfg.windows.control)
        }
    };
    Ok(DecayReport {
        provenance: provenance(cfg, &g),
        boundary: cfg.boundary,
        c_min: cfg.c_min,
        slope_window: cfg.windows.slope,
        entries,
        pooled,
        fixed_ratio,
        sensitivity,
        max_control_error,
        pass,
    })
}

/// Tabulates `E(r)` for one solution and degree.
pub fn decay_entry(
    cfg: &ExperimentConfig,
    h: &Arc<CorrectorHierarchy>,
    sol: &CubeSolution,
    m: usize,
) -> Result<DecayEntry> {
    let big = sol.r;
    let top = big / 4;
    let lo = cfg.r_floor.max(1);
    if top < lo {
        return Err(Error::WindowTooSmall(format!("R = {big} leaves no radii above {lo}")));
    }
    let u = &sol.sample;
    let norm_big = lp_norm(u, Region::Cube(big as f64), 2.0)?;
    let psi = fit_het(h, u, m)?;
    let ut = u.restrict(top)?;
    let rs: Vec<usize> = (lo..=top).collect();
    let table = |psi: &HetPolynomial| -> Result<Vec<f64>> {
        let diff = ut.sub(&evaluate_het(psi, top)?)?;
        rs.iter()
            .map(|&r| Ok(lp_norm(&diff, Region::Cube(r as f64), 2.0)? / norm_big))
            .collect()
    };
    let e = table(&psi)?;
    let e_corrected = if cfg.post_correct {
        let p = apply_macroscopic(&psi.q, &h.abar).scale(-1.0);
        let (w, _) = solve_het_rhs(h, &p)?;
        let psi0 = HetPolynomial::new(h.clone(), psi.q.sub(&w.q))?;
        Some(table(&psi0)?)
    } else {
        None
    };
    let mut entry = DecayEntry {
        m,
        radius: big,
        seed: sol.seed.unwrap_or(0),
        boundary: sol.label.clone(),
        norm_big,
        r: rs,
        e,
        slope: None,
        prefactor: None,
        e_corrected,
    };
    let (x, y) = window_points(&entry, cfg.c_min);
    if let Some((b, a)) = fit_line(&x, &y) {
        entry.slope = Some(b);
        entry.prefactor = Some((a / (m + 1) as f64).exp() * big as f64);
    }
    Ok(entry)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffEntry {
    pub m: usize,
    pub radius: usize,
    pub seed: u64,
    /// `‖D^m u‖_{L²(Q₁)} / ‖u‖_{L²(Q_R)}`.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffFit {
    pub m: usize,
    pub target: f64,
    pub slope: Option<f64>,
    /// `C` in `ratio ≈ (C m / R)^m`.
    pub prefactor: Option<f64>,
    pub within_window: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub provenance: Provenance,
    pub entries: Vec<DiffEntry>,
    pub fits: Vec<DiffFit>,
    pub slope_window: f64,
    pub pass: bool,
}

pub fn run_diff_bounds(cfg: &ExperimentConfig, store: &SolutionStore) -> Result<DiffReport> {
    cfg.validate()?;
    let g = cfg.grid_field(None)?;
    let opts = cfg.solver_options();
    let d = g.dim;
    let mut jobs = Vec::new();
    for &r in &cfg.radii {
        for seed in cfg.seed_list() {
            jobs.push((r, seed));
        }
    }
    let rows: Vec<Vec<DiffEntry>> = jobs
        .par_iter()
        .map(|&(r, seed)| {
            let label = boundary_label(BoundaryKind::Random, 0, seed);
            let sol = store.get(&g, r, &label, Some(seed), opts, || boundary_random(d, g.n, r, seed))?;
            let norm = lp_norm(&sol.sample, Region::Cube(r as f64), 2.0)?;
            cfg.diff_orders
                .iter()
                .map(|&m| {
                    Ok(DiffEntry {
                        m,
                        radius: r,
                        seed,
                        ratio: lattice_difference_norm(&sol.sample, m)? / norm,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let entries: Vec<DiffEntry> = rows.into_iter().flatten().collect();
    let fits: Vec<DiffFit> = cfg
        .diff_orders
        .iter()
        .map(|&m| {
            let (x, y): (Vec<f64>, Vec<f64>) = entries
                .iter()
                .filter(|e| e.m == m && e.ratio > 0.0)
                .map(|e| ((e.radius as f64).ln(), e.ratio.ln()))
                .unzip();
            let fit = fit_line(&x, &y);
            let target = -(m as f64);
            DiffFit {
                m,
                target,
                slope: fit.map(|f| f.0),
                prefactor: fit.map(|f| (f.1 / m as f64).exp() / m as f64),
                within_window: fit.is_some_and(|f| (f.0 - target).abs() <= cfg.windows.slope),
            }
        })
        .collect();
    let pass = fits.iter().all(|f| f.within_window);
    Ok(DiffReport {
        provenance: provenance(cfg, &g),
        entries,
        fits,
        slope_window: cfg.windows.slope,
        pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    /// `‖u‖_r^α ‖u‖_R^{1−α}`.
    pub product: f64,
    /// `(‖u‖_s − product) / ‖u‖_R`; the residual term must cover this.
    pub deficit: f64,
    /// Largest `c` for which the inequality holds here; `None` if any `c` works.
    pub c_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreeBallEntry {
    pub seed: u64,
    pub shape: String,
    pub r: f64,
    pub s: f64,
    pub big: f64,
    pub norm_r: f64,
    pub norm_s: f64,
    pub norm_big: f64,
    pub alphas: Vec<AlphaRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreeBallReport {
    pub provenance: Provenance,
    pub alphas: Vec<f64>,
    pub entries: Vec<ThreeBallEntry>,
    /// Largest `c` that works for every solution, chain and α; `None` when
    /// the residual term is never needed.
    pub c_fit: Option<f64>,
    /// Cases that fail even with `c → 0⁺`.
    pub violations: usize,
    pub pass: bool,
}

/// Evaluates both sides of the three-ball inequality for one chain.
pub fn three_ball_entry(
    sample: &CubeSample,
    seed: u64,
    shape: &str,
    chain: [f64; 3],
    alphas: &[f64],
) -> Result<ThreeBallEntry> {
    let region = |x: f64| if shape == "ball" { Region::Ball(x) } else { Region::Cube(x) };
    let nr = lp_norm(sample, region(chain[0]), 2.0)?;
    let ns = lp_norm(sample, region(chain[1]), 2.0)?;
    let nb = lp_norm(sample, region(chain[2]), 2.0)?;
    let rows = alphas
        .iter()
        .map(|&a| {
            let product = nr.powf(a) * nb.powf(1.0 - a);
            let deficit = if nb > 0.0 { (ns - product) / nb } else { 0.0 };
            let c_max = if deficit <= 0.0 {
                None
            } else {
                Some(-deficit.ln() / chain[0])
            };
            AlphaRow {
                alpha: a,
                product,
                deficit,
                c_max,
            }
        })
        .collect();
    Ok(ThreeBallEntry {
        seed,
        shape: shape.to_string(),
        r: chain[0],
        s: chain[1],
        big: chain[2],
        norm_r: nr,
        norm_s: ns,
        norm_big: nb,
        alphas: rows,
    })
}

/// Fitted `c` and violation count over a set of entries.
pub fn fit_three_ball(entries: &[ThreeBallEntry]) -> (Option<f64>, usize) {
    let mut c_fit: Option<f64> = None;
    let mut violations = 0;
    for row in entries.iter().flat_map(|e| &e.alphas) {
        if let Some(c) = row.c_max {
            if c <= 0.0 {
                violations += 1;
            } else {
                c_fit = Some(c_fit.map_or(c, |v| v.min(c)));
            }
        }
    }
    (c_fit, violations)
}

pub fn run_three_ball(cfg: &ExperimentConfig, store: &SolutionStore) -> Result<ThreeBallReport> {
    cfg.validate()?;
    let g = cfg.grid_field(None)?;
    let tb = &cfg.three_ball;
    let r = tb.radius;
    for c in &tb.cube_chains {
        if c[2] > r as f64 {
            return Err(Error::WindowTooSmall(format!("cube chain {c:?} exceeds Q_{r}")));
        }
    }
    for c in &tb.ball_chains {
        if 2.0 * c[2] > r as f64 {
            return Err(Error::WindowTooSmall(format!("ball chain {c:?} exceeds Q_{r}")));
        }
    }
    let opts = cfg.solver_options();
    let d = g.dim;
    let seeds: Vec<u64> = (0..tb.seeds as u64).map(|i| cfg.seed + i).collect();
    let per_seed: Vec<Vec<ThreeBallEntry>> = seeds
        .par_iter()
        .map(|&seed| {
            let label = boundary_label(BoundaryKind::Random, 0, seed);
            let sol = store.get(&g, r, &label, Some(seed), opts, || boundary_random(d, g.n, r, seed))?;
            let mut out = Vec::new();
            for c in &tb.ball_chains {
                out.push(three_ball_entry(&sol.sample, seed, "ball", *c, &tb.alphas)?);
            }
            for c in &tb.cube_chains {
                out.push(three_ball_entry(&sol.sample, seed, "cube", *c, &tb.alphas)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let entries: Vec<ThreeBallEntry> = per_seed.into_iter().flatten().collect();
    let (c_fit, violations) = fit_three_ball(&entries);
    Ok(ThreeBallReport {
        provenance: provenance(cfg, &g),
        alphas: tb.alphas.clone(),
        entries,
        c_fit,
        violations,
        pass: violations == 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    Correctors(CorrectorReport),
    Analyticity(DecayReport),
    DiffBounds(DiffReport),
    ThreeBall(ThreeBallReport),
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:e}"))
}

impl Report {
    pub fn name(&self) -> &'static str {
        match self {
            Report::Correctors(_) => "correctors",
            Report::Analyticity(_) => "analyticity",
            Report::DiffBounds(_) => "diff-bounds",
            Report::ThreeBall(_) => "three-ball",
        }
    }

    pub fn pass(&self) -> bool {
        match self {
            Report::Correctors(r) => r.pass,
            Report::Analyticity(r) => r.pass,
            Report::DiffBounds(r) => r.pass,
            Report::ThreeBall(r) => r.pass,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        match self {
            Report::Correctors(r) => {
                s.push_str("k,corrector_norm,gradient_norm,abar_norm\n");
                for k in 0..r.corrector_norms.len() {
                    let _ = writeln!(
                        s,
                        "{},{:e},{:e},{:e}",
                        k + 1,
                        r.corrector_norms[k],
                        r.gradient_norms[k],
                        r.abar_norms[k]
                    );
                }
            }
            Report::Analyticity(r) => {
                s.push_str("m,R,seed,r,E\n");
                for e in &r.entries {
                    for (rr, ee) in e.r.iter().zip(&e.e) {
                        let _ = writeln!(s, "{},{},{},{},{:e}", e.m, e.radius, e.seed, rr, ee);
                    }
                }
            }
            Report::DiffBounds(r) => {
                s.push_str("m,R,seed,ratio\n");
                for e in &r.entries {
                    let _ = writeln!(s, "{},{},{},{:e}", e.m, e.radius, e.seed, e.ratio);
                }
            }
            Report::ThreeBall(r) => {
                s.push_str("seed,shape,r,s,R,alpha,norm_r,norm_s,norm_R,product,deficit,c_max\n");
                for e in &r.entries {
                    for a in &e.alphas {
                        let _ = writeln!(
                            s,
                            "{},{},{},{},{},{},{:e},{:e},{:e},{:e},{:e},{}",
                            e.seed,
                            e.shape,
                            e.r,
                            e.s,
                            e.big,
                            a.alpha,
                            e.norm_r,
                            e.norm_s,
                            e.norm_big,
                            a.product,
                            a.deficit,
                            opt(a.c_max)
                        );
                    }
                }
            }
        }
        s
    }

    /// Writes `<name>.json` and `<name>.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let j = dir.join(format!("{}.json", self.name()));
        let c = dir.join(format!("{}.csv", self.name()));
        std::fs::write(&j, self.to_json()?)?;
        std::fs::write(&c, self.to_csv())?;
        Ok((j, c))
    }

    pub fn read(path: &Path) -> Result<Report> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub report: String,
    pub quantity: String,
    pub value: Option<f64>,
    pub target: Option<f64>,
    pub pass: bool,
}

/// Headline numbers of a report.
pub fn summarize(report: &Report) -> Vec<SummaryRow> {
    let name = report.name().to_string();
    let row = |q: String, v: Option<f64>, t: Option<f64>, p: bool| SummaryRow {
        report: name.clone(),
        quantity: q,
        value: v,
        target: t,
        pass: p,
    };
    match report {
        Report::Correctors(r) => vec![
            row("max_cancellation".into(), Some(r.max_cancellation), Some(r.provenance.tolerances.cancellation), r.max_cancellation <= r.provenance.tolerances.cancellation),
            row("max_residual".into(), Some(r.max_residual), Some(r.provenance.tolerances.residual), r.max_residual <= r.provenance.tolerances.residual),
            row("growth_c_fit".into(), Some(r.growth.c_fit), None, r.growth.c_fit.is_finite()),
        ],
        Report::Analyticity(r) => {
            let mut out: Vec<SummaryRow> = r
                .pooled
                .iter()
                .map(|p| row(format!("slope_m{}", p.m), p.slope, Some(p.target), p.within_window))
                .collect();
            if let Some(e) = r.max_control_error {
                out.push(row("max_control_error".into(), Some(e), None, r.pass));
            }
            out
        }
        Report::DiffBounds(r) => r
            .fits
            .iter()
            .map(|f| row(format!("slope_m{}", f.m), f.slope, Some(f.target), f.within_window))
            .collect(),
        Report::ThreeBall(r) => vec![
            row("c_fit".into(), r.c_fit, None, r.pass),
            row("violations".into(), Some(r.violations as f64), Some(0.0), r.violations == 0),
        ],
    }
}

/// Summary rows for a report file, or for every `*.json` report in a directory.
pub fn summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut files = Vec::new();
    if path.is_dir() {
        for e in std::fs::read_dir(path)? {
            let p = e?.path();
            if p.extension().and_then(|x| x.to_str()) == Some("json") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut rows = Vec::new();
    for f in files {
        rows.extend(summarize(&Report::read(&f)?));
    }
    Ok(rows)
}

/// A file reloaded through [`io_roundtrip`].
#[derive(Clone, Debug, PartialEq)]
pub enum Loaded {
    Container(Container),
    Report(Box<Report>),
}

/// Reloads a cache container or a JSON report, validating version,
/// truncation and (when given) the fingerprint.
pub fn io_roundtrip(path: &Path, fingerprint: Option<&str>) -> Result<Loaded> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        let c = Container::from_bytes(&bytes)?;
        if let Some(fp) = fingerprint {
            c.check_fingerprint(fp)?;
        }
        return Ok(Loaded::Container(c));
    }
    let v: Value = serde_json::from_slice(&bytes)?;
    if let Some(fp) = fingerprint {
        let found = v["provenance"]["fingerprint"].as_str().unwrap_or("");
        if found != fp {
            return Err(Error::FingerprintMismatch {
                expected: fp.to_string(),
                found: found.to_string(),
            });
        }
    }
    Ok(Loaded::Report(Box::new(serde_json::from_value(v)?)))
}
