//! Small dense matrix helpers (n <= 3) and matrix-free Krylov solvers.
//!
//! The discrete operators in this crate are never assembled; CG and BiCGStab
//! work through an `apply` closure. Sizes stay modest (a few thousand unknowns
//! per chart), so plain Jacobi-free Krylov iterations with warm starts are
//! enough.

/// Inverse of a symmetric positive matrix given row-major, n in {1,2,3}.
/// Returns None when the determinant is (numerically) zero.
pub fn sym_inverse(n: usize, m: &[f64], out: &mut [f64]) -> Option<f64> {
    debug_assert_eq!(m.len(), n * n);
    match n {
        1 => {
            let det = m[0];
            if det.abs() < 1e-300 {
                return None;
            }
            out[0] = 1.0 / det;
            Some(det)
        }
        2 => {
            let det = m[0] * m[3] - m[1] * m[2];
            if det.abs() < 1e-300 {
                return None;
            }
            let inv = 1.0 / det;
            out[0] = m[3] * inv;
            out[1] = -m[1] * inv;
            out[2] = -m[2] * inv;
            out[3] = m[0] * inv;
            Some(det)
        }
        3 => {
            let c00 = m[4] * m[8] - m[5] * m[7];
            let c01 = m[5] * m[6] - m[3] * m[8];
            let c02 = m[3] * m[7] - m[4] * m[6];
            let det = m[0] * c00 + m[1] * c01 + m[2] * c02;
            if det.abs() < 1e-300 {
                return None;
            }
            let inv = 1.0 / det;
            out[0] = c00 * inv;
            out[1] = (m[2] * m[7] - m[1] * m[8]) * inv;
            out[2] = (m[1] * m[5] - m[2] * m[4]) * inv;
            out[3] = c01 * inv;
            out[4] = (m[0] * m[8] - m[2] * m[6]) * inv;
            out[5] = (m[2] * m[3] - m[0] * m[5]) * inv;
            out[6] = c02 * inv;
            out[7] = (m[1] * m[6] - m[0] * m[7]) * inv;
            out[8] = (m[0] * m[4] - m[1] * m[3]) * inv;
            Some(det)
        }
        _ => panic!("sym_inverse supports n <= 3, got {n}"),
    }
}

/// Determinant of a symmetric matrix, n in {1,2,3}.
pub fn sym_det(n: usize, m: &[f64]) -> f64 {
    match n {
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        3 => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) + m[1] * (m[5] * m[6] - m[3] * m[8])
                + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
        _ => panic!("sym_det supports n <= 3, got {n}"),
    }
}

/// Smallest eigenvalue of a symmetric matrix, n in {1,2,3}.
///
/// Closed forms: quadratic formula for n=2, the trigonometric solution of the
/// characteristic cubic for n=3.
pub fn sym_min_eig(n: usize, m: &[f64]) -> f64 {
    match n {
        1 => m[0],
        2 => {
            let tr = m[0] + m[3];
            let det = m[0] * m[3] - m[1] * m[2];
            let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
            tr / 2.0 - disc
        }
        3 => {
            let p1 = m[1] * m[1] + m[2] * m[2] + m[5] * m[5];
            let q = (m[0] + m[4] + m[8]) / 3.0;
            let p2 = (m[0] - q).powi(2) + (m[4] - q).powi(2) + (m[8] - q).powi(2) + 2.0 * p1;
            if p2 <= 0.0 {
                return q; // multiple of the identity
            }
            let p = (p2 / 6.0).sqrt();
            // B = (A - q I) / p, eigenvalues of A are q + p * eig(B)
            let b = [
                (m[0] - q) / p,
                m[1] / p,
                m[2] / p,
                m[3] / p,
                (m[4] - q) / p,
                m[5] / p,
                m[6] / p,
                m[7] / p,
                (m[8] - q) / p,
            ];
            let detb = sym_det(3, &b);
            let r = (detb / 2.0).clamp(-1.0, 1.0);
            let phi = r.acos() / 3.0;
            // smallest eigenvalue of B is 2 cos(phi + 2pi/3)
            q + p * 2.0 * (phi + 2.0 * std::f64::consts::PI / 3.0).cos()
        }
        _ => panic!("sym_min_eig supports n <= 3, got {n}"),
    }
}

/// In-place dense LU with partial pivoting (row-major). Returns false when a
/// pivot vanishes.
pub fn lu_factor(n: usize, a: &mut [f64], piv: &mut [usize]) -> bool {
    debug_assert_eq!(a.len(), n * n);
    for (i, p) in piv.iter_mut().enumerate() {
        *p = i;
    }
    for col in 0..n {
        let mut best = col;
        let mut best_val = a[col * n + col].abs();
        for row in (col + 1)..n {
            let v = a[row * n + col].abs();
            if v > best_val {
                best = row;
                best_val = v;
            }
        }
        if best_val < 1e-300 {
            return false;
        }
        if best != col {
            for k in 0..n {
                a.swap(col * n + k, best * n + k);
            }
            piv.swap(col, best);
        }
        let pivot = a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] / pivot;
            a[row * n + col] = factor;
            for k in (col + 1)..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
        }
    }
    true
}

/// Solve with a factorization from [`lu_factor`]; `b` becomes the solution.
pub fn lu_solve(n: usize, a: &[f64], piv: &[usize], b: &mut [f64]) {
    let mut x = vec![0.0; n];
    for i in 0..n {
        x[i] = b[piv[i]];
    }
    for i in 0..n {
        for k in 0..i {
            x[i] -= a[i * n + k] * x[k];
        }
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            x[i] -= a[i * n + k] * x[k];
        }
        x[i] /= a[i * n + i];
    }
    b.copy_from_slice(&x);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Conjugate gradient for a symmetric positive (semi-)definite operator.
///
/// `x` holds the initial guess on entry (warm start) and the solution on exit.
/// `project` is applied to residual-propagated quantities and to the iterate;
/// for singular systems (periodic Laplacian) it removes the nullspace
/// component (mean), otherwise pass a no-op.
pub fn conjugate_gradient<A, P>(
    apply: A,
    b: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    max_iter: usize,
    project: P,
) -> SolveStats
where
    A: Fn(&[f64], &mut [f64]),
    P: Fn(&mut [f64]),
{
    let nn = b.len();
    let mut r = vec![0.0; nn];
    let mut ap = vec![0.0; nn];
    project(x);
    apply(x, &mut ap);
    for i in 0..nn {
        r[i] = b[i] - ap[i];
    }
    project(&mut r);
    let b_norm = norm2(b).max(1e-300);
    let mut p = r.clone();
    let mut rsold = dot(&r, &r);
    let mut res = rsold.sqrt();
    if res <= rel_tol * b_norm {
        return SolveStats {
            iterations: 0,
            residual: res,
            converged: true,
        };
    }
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        project(&mut ap);
        let pap = dot(&p, &ap);
        if pap.abs() < 1e-300 {
            return SolveStats {
                iterations: it,
                residual: res,
                converged: false,
            };
        }
        let alpha = rsold / pap;
        axpy(alpha, &p, x);
        axpy(-alpha, &ap, &mut r);
        let rsnew = dot(&r, &r);
        res = rsnew.sqrt();
        if res <= rel_tol * b_norm {
            project(x);
            return SolveStats {
                iterations: it,
                residual: res,
                converged: true,
            };
        }
        let beta = rsnew / rsold;
        for i in 0..nn {
            p[i] = r[i] + beta * p[i];
        }
        rsold = rsnew;
    }
    project(x);
    SolveStats {
        iterations: max_iter,
        residual: res,
        converged: false,
    }
}

/// BiCGStab for nonsymmetric operators (advection-diffusion rows).
///
/// Warm start through `x` as in [`conjugate_gradient`].
pub fn bicgstab<A>(apply: A, b: &[f64], x: &mut [f64], rel_tol: f64, max_iter: usize) -> SolveStats
where
    A: Fn(&[f64], &mut [f64]),
{
    let nn = b.len();
    let mut r = vec![0.0; nn];
    let mut t = vec![0.0; nn];
    apply(x, &mut t);
    for i in 0..nn {
        r[i] = b[i] - t[i];
    }
    let b_norm = norm2(b).max(1e-300);
    let mut res = norm2(&r);
    if res <= rel_tol * b_norm {
        return SolveStats {
            iterations: 0,
            residual: res,
            converged: true,
        };
    }
    let r_hat = r.clone();
    let mut rho = 1.0f64;
    let mut alpha = 1.0f64;
    let mut omega = 1.0f64;
    let mut v = vec![0.0; nn];
    let mut p = vec![0.0; nn];
    let mut s = vec![0.0; nn];
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..nn {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        apply(&p, &mut v);
        let rhv = dot(&r_hat, &v);
        if rhv.abs() < 1e-300 {
            break;
        }
        alpha = rho / rhv;
        for i in 0..nn {
            s[i] = r[i] - alpha * v[i];
        }
        if norm2(&s) <= rel_tol * b_norm {
            axpy(alpha, &p, x);
            return SolveStats {
                iterations: it,
                residual: norm2(&s),
                converged: true,
            };
        }
        apply(&s, &mut t);
        let tt = dot(&t, &t);
        if tt.abs() < 1e-300 {
            break;
        }
        omega = dot(&t, &s) / tt;
        for i in 0..nn {
            x[i] += alpha * p[i] + omega * s[i];
            r[i] = s[i] - omega * t[i];
        }
        res = norm2(&r);
        if res <= rel_tol * b_norm {
            return SolveStats {
                iterations: it,
                residual: res,
                converged: true,
            };
        }
        if omega.abs() < 1e-300 {
            break;
        }
    }
    SolveStats {
        iterations: max_iter,
        residual: res,
        converged: res <= rel_tol * b_norm,
    }
}
