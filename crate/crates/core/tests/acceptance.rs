//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Tests run one at a time under a shared lock so that their timings are
//! their own. Criteria 7 to 9 share one in-memory solution store.

use std::io::Write as _;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use homogen::cell::{build_hierarchy, corrector_residual, CellOptions, CorrectorHierarchy};
use homogen::cubesolver::{lp_norm, Region};
use homogen::exact::{apply_macroscopic_exact, invert_macroscopic_exact, RationalPolynomial, RationalSequence};
use homogen::fields::{gallery_field, sample_field, FieldSpec, GridField};
use homogen::harness::{
    growth_fit, run_analyticity, run_diff_bounds, run_three_ball, BoundaryKind, ExperimentConfig, SolutionStore,
};
use homogen::hetpoly::{evaluate_het, interpolate_het, HetPolynomial};
use homogen::polynomials::{
    gaussian_gradient_energy, gaussian_inner, gaussian_truncated_cube, hermite_poly,
    invert_laplacian_homogeneous, invert_macroscopic, GaussianWeight, HomogenizedTensorSequence, Polynomial,
};
use homogen::tensors::{count, multi_indices, SymTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes straight to stderr so the line survives output capture.
fn verdict(n: usize, name: &str, pass: bool, detail: &str) -> bool {
    let line = format!(
        "criterion {n:>2} [{}] {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

fn random_poly(rng: &mut ChaCha8Rng, d: usize, lo: usize, hi: usize) -> Polynomial {
    let layers: Vec<Vec<f64>> = (0..=hi)
        .map(|k| {
            (0..count(d, k))
                .map(|_| if k >= lo { rng.gen_range(-1.0..1.0) } else { 0.0 })
                .collect()
        })
        .collect();
    Polynomial::from_monomials(d, &layers)
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> SymTensor {
    let b: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let m: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| (0..d).map(|k| b[i][k] * b[j][k]).sum::<f64>() + if i == j { 0.5 } else { 0.0 })
                .collect()
        })
        .collect();
    SymTensor::from_matrix(&m)
}

fn field(name: &str, d: usize, params: serde_json::Value, n: usize) -> GridField {
    sample_field(&gallery_field(name, d, &params).unwrap(), n).unwrap()
}

const GALLERY: [&str; 4] = ["constant", "laminate1d", "trig2d", "rotating"];

/// Order-4 hierarchies of every two-dimensional gallery field at `N = 64`.
/// Also returns the build time in seconds.
fn gallery_hierarchies() -> &'static (Vec<(String, Arc<CorrectorHierarchy>)>, f64) {
    static H: OnceLock<(Vec<(String, Arc<CorrectorHierarchy>)>, f64)> = OnceLock::new();
    H.get_or_init(|| {
        let t0 = Instant::now();
        let hs = GALLERY
            .iter()
            .map(|name| {
                let g = field(name, 2, json!({}), 64);
                (name.to_string(), Arc::new(build_hierarchy(&g, 4, CellOptions::default()).unwrap()))
            })
            .collect();
        (hs, t0.elapsed().as_secs_f64())
    })
}

fn oracle_1d(n: usize, m: usize) -> &'static CorrectorHierarchy {
    static H: OnceLock<CorrectorHierarchy> = OnceLock::new();
    let h = H.get_or_init(|| build_hierarchy(&field("laminate1d", 1, json!({}), n), m, CellOptions::default()).unwrap());
    assert_eq!((h.n(), h.order), (n, m));
    h
}

fn trig_hierarchy() -> Arc<CorrectorHierarchy> {
    static H: OnceLock<Arc<CorrectorHierarchy>> = OnceLock::new();
    H.get_or_init(|| Arc::new(build_hierarchy(&field("trig2d", 2, json!({}), 32), 4, CellOptions::default()).unwrap()))
        .clone()
}

fn corpus_config() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn store() -> &'static SolutionStore {
    static S: OnceLock<SolutionStore> = OnceLock::new();
    S.get_or_init(|| SolutionStore::new(None))
}

fn dyadic(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo..hi) * 64.0).round() / 64.0
}

#[test]
fn criterion_01_exact_polynomial_identities() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_lap: f64 = 0.0;
    let mut worst_float: f64 = 0.0;
    let mut inexact = 0;
    for case in 0..200 {
        let d = 2 + case % 2;
        let m = rng.gen_range(0..=10);
        let abar = random_spd(&mut rng, d);
        let p = random_poly(&mut rng, d, m, m);
        let q = invert_laplacian_homogeneous(&p, &abar).unwrap();
        let res = q.contract_derivatives(&abar).scale(-1.0).sub(&p);
        worst_lap = worst_lap.max(res.max_coeff() / p.max_coeff());

        // dyadic data are exact in both f64 and rational arithmetic
        let b: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| dyadic(&mut rng, -1.0, 1.0)).collect()).collect();
        let a2: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| (0..d).map(|k| b[i][k] * b[j][k]).sum::<f64>() + if i == j { 0.5 } else { 0.0 }).collect())
            .collect();
        let top = rng.gen_range(2..=6);
        let mut tensors = vec![SymTensor::from_matrix(&a2)];
        for k in 3..=top {
            tensors.push(SymTensor::from_fn(d, k, |_| dyadic(&mut rng, -0.5, 0.5)));
        }
        let seq = HomogenizedTensorSequence::new(d, tensors).unwrap();
        let deg = rng.gen_range(0..=6);
        let layers: Vec<Vec<f64>> = (0..=deg).map(|k| (0..count(d, k)).map(|_| dyadic(&mut rng, -1.0, 1.0)).collect()).collect();
        let p = Polynomial::from_monomials(d, &layers);
        let rp = RationalPolynomial::from_poly(&p).unwrap();
        let rs = RationalSequence::from_sequence(&seq).unwrap();
        let qe = invert_macroscopic_exact(&rp, &rs).unwrap();
        if !apply_macroscopic_exact(&qe, &rs).add(&rp).is_zero() {
            inexact += 1;
        }
        let qe = qe.to_poly();
        let qf = invert_macroscopic(&p, &seq).unwrap();
        worst_float = worst_float.max(qf.sub(&qe).max_coeff() / qe.max_coeff().max(f64::MIN_POSITIVE));
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst_lap <= 1e-12 && inexact == 0 && worst_float <= 1e-12 && secs < 10.0;
    assert!(verdict(
        1,
        "exact polynomial identities",
        pass,
        &format!(
            "Laplacian inverse residual {worst_lap:.2e} (≤ 1e-12); macroscopic inverse: {inexact}/200 nonzero \
             rational residuals, f64 path within {worst_float:.2e} of exact; {secs:.2}s"
        ),
    ));
}

#[test]
fn criterion_02_constant_coefficient_degeneration() {
    let _g = serial();
    let t0 = Instant::now();
    let a = vec![vec![2.0, 0.7], vec![0.1, 1.5]];
    let g = field("constant", 2, json!({ "matrix": a }), 64);
    let h = build_hierarchy(&g, 4, CellOptions::default()).unwrap();
    let phi = (1..=4).map(|k| h.corrector_norm(k)).fold(0.0, f64::max);
    let high = (3..=4).map(|k| h.abar.get(k).unwrap().max_abs()).fold(0.0, f64::max);
    let sym = SymTensor::from_matrix(&[vec![2.0, 0.4], vec![0.4, 1.5]]);
    let dev = h.abar.abar().sub(&sym).unwrap().max_abs();
    let secs = t0.elapsed().as_secs_f64();
    let pass = phi <= 1e-8 && high <= 1e-8 && dev <= 1e-8 && secs < 60.0;
    assert!(verdict(
        2,
        "constant-coefficient degeneration",
        pass,
        &format!("max ‖φ^(k)‖ {phi:.2e}, max |ā^(k≥3)| {high:.2e}, |ā − sym A| {dev:.2e}, {secs:.1}s"),
    ));
}

#[test]
fn criterion_03_one_dimensional_and_laminate_oracles() {
    let _g = serial();
    let t0 = Instant::now();
    let n = 512;
    let h = oracle_1d(n, 4);
    let sqrt3 = 3f64.sqrt();
    let abar_err = (h.abar.abar().coeffs()[0] - sqrt3).abs();
    // discrete derivative on each cell against √3/a − 1 at the cell center
    let phi = h.phi[1].component(0);
    let hh = 1.0 / n as f64;
    let mut l2 = 0.0;
    for i in 0..n {
        let dphi = (phi[(i + 1) % n] - phi[i]) / hh;
        let x = (i as f64 + 0.5) * hh;
        let exact = sqrt3 / (2.0 + (2.0 * std::f64::consts::PI * x).cos()) - 1.0;
        l2 += (dphi - exact).powi(2) * hh;
    }
    let l2 = l2.sqrt();
    let lam = build_hierarchy(&field("laminate1d", 2, json!({}), 256), 2, CellOptions::default()).unwrap();
    let target = SymTensor::from_matrix(&[vec![sqrt3, 0.0], vec![0.0, 2.0]]);
    let lam_err = lam.abar.abar().sub(&target).unwrap().max_abs();
    let secs = t0.elapsed().as_secs_f64();
    let pass = abar_err <= 1e-4 && l2 <= 1e-4 && lam_err <= 1e-3 && secs < 120.0;
    assert!(verdict(
        3,
        "1-D and laminate oracles",
        pass,
        &format!("|ā − √3| {abar_err:.2e}, ‖φ′ − (√3/a − 1)‖ {l2:.2e}, laminate {lam_err:.2e}, {secs:.1}s"),
    ));
}

#[test]
fn criterion_04_induction_cancellation() {
    let _g = serial();
    let (hs, secs) = gallery_hierarchies();
    let secs = *secs;
    let mut worst = 0.0f64;
    let mut records = 0;
    for (_, h) in hs {
        for c in &h.meta.cancellation {
            worst = worst.max(c.ratio);
            records += 1;
        }
    }
    let pass = worst <= 1e-8 && records > 0 && secs < 600.0;
    assert!(verdict(
        4,
        "induction cancellation",
        pass,
        &format!("worst polynomial/periodic ratio {worst:.2e} over {records} components (≤ 1e-8), built in {secs:.1}s"),
    ));
}

#[test]
fn criterion_05_corrector_equation_residual() {
    let _g = serial();
    let t0 = Instant::now();
    let h1 = oracle_1d(512, 4);
    let mut worst1 = 0.0f64;
    for k in 0..=4 {
        for a in multi_indices(1, k) {
            worst1 = worst1.max(corrector_residual(h1, &Polynomial::monomial(&a, 1.0)).unwrap());
        }
    }
    let mut worst2 = 0.0f64;
    for (_, h) in &gallery_hierarchies().0 {
        for k in 0..=4 {
            for a in multi_indices(2, k) {
                worst2 = worst2.max(corrector_residual(h, &Polynomial::monomial(&a, 1.0)).unwrap());
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst1 <= 1e-6 && worst2 <= 1e-4;
    assert!(verdict(
        5,
        "corrector-equation residual",
        pass,
        &format!("1-D {worst1:.2e} (≤ 1e-6), 2-D gallery {worst2:.2e} (≤ 1e-4), {secs:.1}s"),
    ));
}

#[test]
fn criterion_06_interpolation_bijection() {
    let _g = serial();
    let t0 = Instant::now();
    let h = trig_hierarchy();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let m = rng.gen_range(0..=4);
        let q = random_poly(&mut rng, 2, 0, m);
        let psi = HetPolynomial::new(h.clone(), q.clone()).unwrap();
        let diffs: Vec<SymTensor> = (0..=m).map(|k| psi.intrinsic_differences(k).unwrap()).collect();
        let back = interpolate_het(&h, &diffs).unwrap();
        worst = worst.max(back.q.sub(&q).max_coeff());
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-8;
    assert!(verdict(
        6,
        "interpolation bijection",
        pass,
        &format!("worst coefficient error {worst:.2e} over 50 elements (≤ 1e-8), {secs:.1}s"),
    ));
}

#[test]
fn criterion_07_large_scale_analyticity() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = corpus_config();
    let report = run_analyticity(&cfg, store()).unwrap();
    let mut detail = String::new();
    for p in &report.pooled {
        let per: Vec<f64> = report
            .entries
            .iter()
            .filter(|e| e.m == p.m)
            .filter_map(|e| e.slope)
            .collect();
        let (lo, hi) = per
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
        detail += &format!(
            "m={} slope {:.3} (target {}, per-solution range [{lo:.2}, {hi:.2}]); ",
            p.m,
            p.slope.unwrap_or(f64::NAN),
            p.target
        );
    }
    let control = ExperimentConfig {
        field: FieldSpec::Gallery {
            name: "constant".into(),
            d: 2,
            params: json!({}),
        },
        radii: vec![16, 32],
        seeds: 2,
        boundary: BoundaryKind::Harmonic,
        ..corpus_config()
    };
    let ctrl = run_analyticity(&control, &SolutionStore::new(None)).unwrap();
    let ce = ctrl.max_control_error.unwrap();
    let secs = t0.elapsed().as_secs_f64();
    detail += &format!("harmonic control max E {ce:.2e} (≤ 1e-8), {secs:.0}s");
    let pass = report.pass && ce <= 1e-8 && secs < 1800.0;
    assert!(verdict(7, "large-scale analyticity exponents", pass, &detail));
}

#[test]
fn criterion_08_difference_bounds() {
    let _g = serial();
    let t0 = Instant::now();
    let report = run_diff_bounds(&corpus_config(), store()).unwrap();
    let mut detail = String::new();
    for f in &report.fits {
        detail += &format!("m={} slope {:.3} (target {}); ", f.m, f.slope.unwrap_or(f64::NAN), f.target);
    }
    let secs = t0.elapsed().as_secs_f64();
    detail += &format!("{secs:.0}s");
    assert!(verdict(8, "difference bounds", report.pass && secs < 900.0, &detail));
}

#[test]
fn criterion_09_three_ball_property() {
    let _g = serial();
    let t0 = Instant::now();
    let report = run_three_ball(&corpus_config(), store()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let rows: usize = report.entries.iter().map(|e| e.alphas.len()).sum();
    let c = match report.c_fit {
        Some(c) => format!("{c:.3e}"),
        None => "unconstrained (every c > 0 works)".into(),
    };
    let pass = report.violations == 0 && report.c_fit.map_or(true, |c| c > 0.0) && report.entries.len() == 40;
    assert!(verdict(
        9,
        "three-ball property",
        pass,
        &format!("fitted c {c}, {} violations over {rows} cases, {secs:.0}s", report.violations),
    ));
}

#[test]
fn criterion_10_hermite_gaussian_suite() {
    let _g = serial();
    let t0 = Instant::now();
    let w1 = GaussianWeight::new(vec![0.0], 0.25).unwrap();
    let mut orth = 0.0f64;
    for m in 0..=10 {
        for n in 0..=10 {
            let v = gaussian_inner(&hermite_poly(m), &hermite_poly(n), &w1).unwrap();
            let norm = 2f64.powi(m as i32) * (1..=m).map(|k| k as f64).product::<f64>();
            let err = if m == n { (v - norm).abs() / norm } else { v.abs() / norm };
            orth = orth.max(err);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut min22, mut min23, mut fail22, mut fail23) = (f64::INFINITY, f64::INFINITY, 0, 0);
    let mut min_proof = f64::INFINITY;
    for _ in 0..100 {
        let d = rng.gen_range(1..=3);
        let m = rng.gen_range(1..=8);
        let p = random_poly(&mut rng, d, 0, m);
        let y: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = rng.gen_range(0.1..2.0);
        let w = GaussianWeight::new(y, t).unwrap();
        let mass = gaussian_inner(&p, &p, &w).unwrap();
        let energy = gaussian_gradient_energy(&p, &w).unwrap();
        let m22 = 2.0 * d as f64 * (m + 1) as f64 / t * mass / energy;
        let (inner, _) = gaussian_truncated_cube(&p, &w, 4.0 * (m as f64 * t).sqrt()).unwrap();
        let m23 = 2.0 * inner / mass;
        // the radius the tail estimate actually controls
        let (wide, _) = gaussian_truncated_cube(&p, &w, 16.0 * (m as f64 * t).sqrt()).unwrap();
        min_proof = min_proof.min(2.0 * wide / mass);
        min22 = min22.min(m22);
        min23 = min23.min(m23);
        fail22 += (m22 < 1.0) as usize;
        fail23 += (m23 < 1.0) as usize;
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = orth <= 1e-10 && fail22 == 0 && fail23 == 0 && secs < 5.0;
    assert!(verdict(
        10,
        "Hermite/Gaussian suite",
        pass,
        &format!(
            "orthogonality {orth:.2e}; gradient bound min margin {min22:.3} ({fail22}/100 fail); \
             truncated-cube bound min margin {min23:.3} ({fail23}/100 fail), \
             {min_proof:.3} on the cube of side 16√(mt); {secs:.2}s"
        ),
    ));
}

/// Smallest `C` with `‖ψ‖_{Q_r} ≤ Σ_k (C r/(k+1))^k |D^k ψ̂(0)|`.
fn needed_constant(norm: f64, diffs: &[f64], r: f64) -> f64 {
    let rhs = |c: f64| -> f64 {
        diffs
            .iter()
            .enumerate()
            .map(|(k, v)| (c * r / (k + 1) as f64).powi(k as i32) * v)
            .sum()
    };
    if rhs(0.0) >= norm {
        return 0.0;
    }
    let mut hi = 1.0;
    while rhs(hi) < norm {
        hi *= 2.0;
        if hi > 1e12 {
            return f64::INFINITY;
        }
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rhs(mid) < norm {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

#[test]
fn criterion_11_growth_bound_fits() {
    let _g = serial();
    let t0 = Instant::now();
    let mut detail = String::new();
    let mut pass = true;
    for (name, h) in &gallery_hierarchies().0 {
        let v: Vec<f64> = (1..=4)
            .map(|k| h.gradient_norm(k) + h.abar.get(k).map_or(0.0, |t| t.norm()))
            .collect();
        let f = growth_fit(&v);
        let logs: Vec<f64> = v.iter().map(|x| (x + 1.0).ln()).collect();
        let linear = logs
            .iter()
            .enumerate()
            .all(|(i, l)| *l <= (i + 1) as f64 * f.c_fit.ln() + 1e-12);
        pass &= f.c_fit.is_finite() && linear;
        detail += &format!("{name} C_fit {:.3}; ", f.c_fit);
    }
    let h = trig_hierarchy();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut needed = Vec::new();
    for _ in 0..50 {
        let m = rng.gen_range(1..=4);
        let psi = HetPolynomial::new(h.clone(), random_poly(&mut rng, 2, 0, m)).unwrap();
        let diffs: Vec<f64> = (0..=m).map(|k| psi.intrinsic_differences(k).unwrap().norm()).collect();
        let big = evaluate_het(&psi, 4 * m).unwrap();
        for r in m..=4 * m {
            let norm = lp_norm(&big.restrict(r).unwrap(), Region::Cube(r as f64), 2.0).unwrap();
            needed.push(needed_constant(norm, &diffs, r as f64));
        }
    }
    needed.sort_by(|a, b| a.total_cmp(b));
    let c_fit = *needed.last().unwrap();
    let median = needed[needed.len() / 2];
    pass &= c_fit.is_finite() && c_fit > 0.0;
    let secs = t0.elapsed().as_secs_f64();
    detail += &format!(
        "A_m growth C_fit {c_fit:.3} over {} (ψ, r) pairs (median needed {median:.3}), {secs:.1}s",
        needed.len()
    );
    assert!(verdict(11, "growth-bound fits", pass, &detail));
}
