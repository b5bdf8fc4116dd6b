//! Preconditioned Krylov iterations with sequential (deterministic) reductions.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KrylovStats {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Removes the arithmetic mean.
pub(crate) fn project_mean(x: &mut [f64]) {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= m);
}

pub(crate) struct System<'a> {
    pub apply: &'a dyn Fn(&[f64], &mut [f64]),
    pub precond: &'a dyn Fn(&[f64], &mut [f64]),
    /// Applied to iterates and search directions, for singular systems.
    pub project: Option<&'a dyn Fn(&mut [f64])>,
}

/// Conjugate gradients for symmetric positive (semi)definite systems.
/// `x` holds the initial guess and receives the solution.
pub(crate) fn pcg(sys: &System, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> KrylovStats {
    let n = b.len();
    let bn = norm(b);
    if bn == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return KrylovStats {
            iterations: 0,
            residual: 0.0,
            converged: true,
        };
    }
    if let Some(p) = sys.project {
        p(x);
    }
    let mut r = vec![0.0; n];
    (sys.apply)(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut z = vec![0.0; n];
    (sys.precond)(&r, &mut z);
    if let Some(p) = sys.project {
        p(&mut z);
    }
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut res = norm(&r) / bn;
    let mut it = 0;
    while res > tol && it < max_iter {
        (sys.apply)(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        (sys.precond)(&r, &mut z);
        if let Some(pr) = sys.project {
            pr(&mut z);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        it += 1;
        res = norm(&r) / bn;
    }
    if let Some(pr) = sys.project {
        pr(x);
    }
    // true residual
    (sys.apply)(x, &mut ap);
    let true_res = ap.iter().zip(b).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt() / bn;
    KrylovStats {
        iterations: it,
        residual: true_res,
        converged: true_res <= tol * 10.0 && res <= tol,
    }
}

/// Right-preconditioned BiCGStab for nonsymmetric systems.
pub(crate) fn bicgstab(
    sys: &System,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> KrylovStats {
    let n = b.len();
    let bn = norm(b);
    if bn == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return KrylovStats {
            iterations: 0,
            residual: 0.0,
            converged: true,
        };
    }
    let proj = |v: &mut [f64]| {
        if let Some(p) = sys.project {
            p(v);
        }
    };
    proj(x);
    let mut r = vec![0.0; n];
    (sys.apply)(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut shat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut res = norm(&r) / bn;
    let mut it = 0;
    while res > tol && it < max_iter {
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        (sys.precond)(&p, &mut phat);
        proj(&mut phat);
        (sys.apply)(&phat, &mut v);
        let r0v = dot(&r0, &v);
        if r0v == 0.0 {
            break;
        }
        alpha = rho / r0v;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) / bn <= tol {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            it += 1;
            break;
        }
        (sys.precond)(&s, &mut shat);
        proj(&mut shat);
        (sys.apply)(&shat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        it += 1;
        res = norm(&r) / bn;
        if omega == 0.0 {
            break;
        }
    }
    proj(x);
    (sys.apply)(x, &mut t);
    let true_res = t.iter().zip(b).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt() / bn;
    KrylovStats {
        iterations: it,
        residual: true_res,
        converged: true_res <= tol * 10.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(x: &[f64], y: &mut [f64], skew: f64) {
        let n = x.len();
        for i in 0..n {
            let l = if i > 0 { x[i - 1] } else { 0.0 };
            let r = if i + 1 < n { x[i + 1] } else { 0.0 };
            y[i] = 2.0 * x[i] - (1.0 + skew) * l - (1.0 - skew) * r;
        }
    }

    #[test]
    fn cg_solves_dirichlet_laplacian() {
        let n = 50;
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let apply = |x: &[f64], y: &mut [f64]| tridiag(x, y, 0.0);
        let pre = |r: &[f64], z: &mut [f64]| z.iter_mut().zip(r).for_each(|(z, r)| *z = r / 2.0);
        let sys = System {
            apply: &apply,
            precond: &pre,
            project: None,
        };
        let mut x = vec![0.0; n];
        let st = pcg(&sys, &b, &mut x, 1e-12, 500);
        assert!(st.converged);
        let mut y = vec![0.0; n];
        tridiag(&x, &mut y, 0.0);
        for (a, b) in y.iter().zip(&b) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn bicgstab_solves_nonsymmetric() {
        let n = 40;
        let b: Vec<f64> = (0..n).map(|i| 1.0 + (i % 3) as f64).collect();
        let apply = |x: &[f64], y: &mut [f64]| tridiag(x, y, 0.3);
        let pre = |r: &[f64], z: &mut [f64]| z.copy_from_slice(r);
        let sys = System {
            apply: &apply,
            precond: &pre,
            project: None,
        };
        let mut x = vec![0.0; n];
        let st = bicgstab(&sys, &b, &mut x, 1e-12, 1000);
        assert!(st.converged, "{st:?}");
    }
}
