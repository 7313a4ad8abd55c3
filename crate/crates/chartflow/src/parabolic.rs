//! Fundamental solutions and the linear parabolic substep solver.
//!
//! Production stepping is implicit Euler in the rescaled time `tau`
//! (unconditionally stable); the Gaussian kernel and its Levy drift
//! correction exist for validation, where the discrete Duhamel identity ties
//! the two representations together.

use crate::error::{Error, Result};
use crate::geometry::ChartGeometry;
use crate::grid::{self, ChartField};
use crate::linalg::{self, sym_det, sym_inverse};

/// Constant-coefficient anisotropic heat kernel in `tau` time,
/// diffusivity `rho * nu * a`.
#[derive(Debug, Clone)]
pub struct GaussianKernel {
    pub dim: usize,
    pub a: Vec<f64>,
    a_inv: Vec<f64>,
    det_a: f64,
    pub rho_nu: f64,
}

impl GaussianKernel {
    pub fn new(dim: usize, a: Vec<f64>, rho_nu: f64) -> Result<Self> {
        assert_eq!(a.len(), dim * dim);
        let mut a_inv = vec![0.0; dim * dim];
        let det_a = sym_inverse(dim, &a, &mut a_inv).ok_or_else(|| Error::Grid(
            "gaussian kernel: singular diffusion matrix".into(),
        ))?;
        if det_a <= 0.0 || rho_nu <= 0.0 {
            return Err(Error::Grid(
                "gaussian kernel: diffusion matrix must be SPD and rho*nu positive".into(),
            ));
        }
        Ok(GaussianKernel {
            dim,
            a,
            a_inv,
            det_a,
            rho_nu,
        })
    }

    /// (det a)^{-1/2} (4 pi rho nu dt)^{-n/2} exp(-a^{ij} dx_i dx_j / (4 rho nu dt)).
    pub fn eval(&self, dt: f64, dx: &[f64]) -> Result<f64> {
        if dt <= 0.0 {
            return Err(Error::Grid(format!("gaussian kernel: dt must be positive, got {dt}")));
        }
        let n = self.dim;
        debug_assert_eq!(dx.len(), n);
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += self.a_inv[i * n + j] * dx[i] * dx[j];
            }
        }
        let denom = 4.0 * self.rho_nu * dt;
        let norm = self.det_a.sqrt().recip()
            * (std::f64::consts::PI * denom).powf(-(n as f64) / 2.0);
        Ok(norm * (-quad / denom).exp())
    }

    /// Spatial derivative dN/dx_k at (dt, dx).
    pub fn eval_dx(&self, dt: f64, dx: &[f64], k: usize) -> Result<f64> {
        let v = self.eval(dt, dx)?;
        let n = self.dim;
        let mut lin = 0.0;
        for j in 0..n {
            lin += self.a_inv[k * n + j] * dx[j];
        }
        Ok(v * (-2.0 * lin / (4.0 * self.rho_nu * dt)))
    }

    /// Trapezoid mass over the box of half-width `8 sqrt(rho nu dt)` per axis
    /// (stretched by the largest diffusion eigenvalue for anisotropic a).
    pub fn quadrature_mass(&self, dt: f64, points_per_axis: usize) -> Result<f64> {
        let n = self.dim;
        // trace bounds the largest eigenvalue of SPD a
        let trace: f64 = (0..n).map(|i| self.a[i * n + i]).sum();
        let half = 8.0 * (self.rho_nu * dt * trace.max(1.0)).sqrt();
        let m = points_per_axis;
        let step = 2.0 * half / (m - 1) as f64;
        let mut total = 0.0;
        let count = m.pow(n as u32);
        let mut dx = vec![0.0; n];
        for idx in 0..count {
            let mut rem = idx;
            let mut weight = 1.0;
            for a in 0..n {
                let c = rem % m;
                rem /= m;
                dx[a] = -half + c as f64 * step;
                if c == 0 || c == m - 1 {
                    weight *= 0.5;
                }
            }
            total += weight * self.eval(dt, &dx)?;
        }
        Ok(total * step.powi(n as i32))
    }
}

/// Truncated Levy (parametrix) correction of the Gaussian for a constant
/// drift `b`: p = N + int int N phi_K, phi_K = sum_{m=1..K} (L N)_m with
/// (L N)_1 = L N = -rho sum_k b_k dN/dx_k (the stated homogeneous operator
/// applied to N) and the stated composition recursion.
pub struct LevyKernel {
    pub kernel: GaussianKernel,
    pub drift: Vec<f64>,
    pub terms: usize,
    pub rho: f64,
    /// quadrature resolution: time points per nesting level
    pub time_points: usize,
    /// spatial points per axis per nesting level
    pub space_points: usize,
}

pub fn levy_expansion(
    kernel: GaussianKernel,
    drift: Vec<f64>,
    terms: usize,
    rho: f64,
) -> Result<LevyKernel> {
    if terms > 3 {
        return Err(Error::Grid(format!(
            "levy expansion capped at 3 terms, got {terms}"
        )));
    }
    assert_eq!(drift.len(), kernel.dim);
    Ok(LevyKernel {
        kernel,
        drift,
        terms,
        rho,
        time_points: 6,
        space_points: 13,
    })
}

impl LevyKernel {
    /// (L N)_1 at time difference dt and offset dx.
    fn ln1(&self, dt: f64, dx: &[f64]) -> f64 {
        if self.drift.iter().all(|&b| b == 0.0) {
            return 0.0;
        }
        let mut acc = 0.0;
        for (k, &bk) in self.drift.iter().enumerate() {
            acc += bk * self.kernel.eval_dx(dt, dx, k).unwrap_or(0.0);
        }
        -self.rho * acc
    }

    /// (L N)_m via the composition recursion, midpoint quadrature.
    fn ln_m(&self, m: usize, dt: f64, dx: &[f64]) -> f64 {
        if m == 1 {
            return self.ln1(dt, dx);
        }
        let n = self.kernel.dim;
        let tq = self.time_points;
        let sq = self.space_points;
        let half = 8.0 * (self.kernel.rho_nu * dt).sqrt() + self.rho * 2.0;
        let dt_step = dt / tq as f64;
        let dx_step = 2.0 * half / sq as f64;
        let mut total = 0.0;
        let mut xi = vec![0.0; n];
        let cells = (sq as u64).pow(n as u32);
        for ti in 0..tq {
            let sigma = (ti as f64 + 0.5) * dt_step; // midpoint in (0, dt)
            for cell in 0..cells {
                let mut rem = cell;
                for a in 0..n {
                    let c = (rem % sq as u64) as f64;
                    rem /= sq as u64;
                    xi[a] = -half + (c + 0.5) * dx_step;
                }
                // (LN)_{m}(dt, dx) = int (LN)_{m-1}(dt - sigma, dx - xi) (LN)_1(sigma, xi)
                let mut shifted = vec![0.0; n];
                for a in 0..n {
                    shifted[a] = dx[a] - xi[a];
                }
                let outer = self.ln_m(m - 1, dt - sigma, &shifted);
                if outer != 0.0 {
                    total += outer * self.ln1(sigma, &xi);
                }
            }
        }
        total * dt_step * dx_step.powi(n as i32)
    }

    /// The m-th correction term int int N (L N)_m alone.
    pub fn correction_term(&self, m: usize, dt: f64, dx: &[f64]) -> f64 {
        let n = self.kernel.dim;
        let tq = self.time_points;
        let sq = self.space_points;
        let half = 8.0 * (self.kernel.rho_nu * dt).sqrt() + self.rho * 2.0;
        let dt_step = dt / tq as f64;
        let dx_step = 2.0 * half / sq as f64;
        let mut total = 0.0;
        let mut xi = vec![0.0; n];
        let mut shifted = vec![0.0; n];
        let cells = (sq as u64).pow(n as u32);
        for ti in 0..tq {
            let sigma = (ti as f64 + 0.5) * dt_step;
            for cell in 0..cells {
                let mut rem = cell;
                for a in 0..n {
                    let c = (rem % sq as u64) as f64;
                    rem /= sq as u64;
                    xi[a] = -half + (c + 0.5) * dx_step;
                }
                for a in 0..n {
                    shifted[a] = dx[a] - xi[a];
                }
                let nval = self.kernel.eval(dt - sigma, &shifted).unwrap_or(0.0);
                if nval != 0.0 {
                    total += nval * self.ln_m(m, sigma, &xi);
                }
            }
        }
        total * dt_step * dx_step.powi(n as i32)
    }

    /// Corrected kernel value N + sum_{m=1..terms} int int N (L N)_m.
    pub fn eval(&self, dt: f64, dx: &[f64]) -> Result<f64> {
        let base = self.kernel.eval(dt, dx)?;
        if self.terms == 0 || self.drift.iter().all(|&b| b == 0.0) {
            return Ok(base);
        }
        let mut total = base;
        for m in 1..=self.terms {
            total += self.correction_term(m, dt, dx);
        }
        Ok(total)
    }
}

// ---------------------------------------------------------------------------
// Implicit Euler stepping

/// One linear parabolic solve over a unit tau interval:
/// dv/dtau - rho (nu sum a_qk d2_qk v + sum b_k d_k v - sum w^k d_k v) = rho * source.
pub struct ParabolicStepProblem<'a> {
    pub geometry: &'a ChartGeometry,
    pub nu: f64,
    pub rho: f64,
    /// tau substeps over the unit interval.
    pub substeps: usize,
    pub tau_start: f64,
    pub initial: &'a ChartField,
    /// Unscaled source per level (substeps+1 entries; level 0 unused).
    pub source: Option<&'a [Vec<f64>]>,
    /// Frozen convection per level per axis (substeps+1 x n).
    pub convection: Option<&'a [Vec<Vec<f64>>]>,
    /// Dirichlet boundary data per level (substeps+1 x boundary-node count);
    /// absent -> free one-sided closure at chart edges.
    pub boundary: Option<&'a [Vec<f64>]>,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl<'a> ParabolicStepProblem<'a> {
    pub fn homogeneous(
        geometry: &'a ChartGeometry,
        nu: f64,
        rho: f64,
        substeps: usize,
        initial: &'a ChartField,
    ) -> Self {
        ParabolicStepProblem {
            geometry,
            nu,
            rho,
            substeps,
            tau_start: initial.tau,
            initial,
            source: None,
            convection: None,
            boundary: None,
            rel_tol: 1e-12,
            max_iter: 10_000,
        }
    }
}

/// Apply the implicit operator (I - dtau rho L) with frozen convection `w`
/// (one slice per axis, may be empty).
#[allow(clippy::too_many_arguments)]
fn apply_implicit(
    geometry: &ChartGeometry,
    nu: f64,
    rho: f64,
    dtau: f64,
    w: &[&[f64]],
    dirichlet_rows: bool,
    x: &[f64],
    y: &mut [f64],
) {
    let grid = &geometry.grid;
    let n = grid.ndim();
    let strides = grid.strides();
    let flat = geometry.flat_coefficients;
    let nn = n * n;
    let mut coords_buf = [0usize; 3];
    for (node, yv) in y.iter_mut().enumerate() {
        let coords = &mut coords_buf[..n];
        let mut rem = node;
        for a in 0..n {
            coords[a] = rem / strides[a];
            rem %= strides[a];
        }
        if dirichlet_rows && grid.is_boundary(coords) {
            *yv = x[node];
            continue;
        }
        let mut lv = 0.0;
        if flat {
            for a in 0..n {
                lv += nu * grid::d2_at(grid, &strides, x, node, coords, a);
            }
        } else {
            let a_blk = geometry.coeff_a.at(node);
            for q in 0..n {
                for k in 0..n {
                    let aqk = a_blk[q * n + k];
                    if aqk == 0.0 {
                        continue;
                    }
                    let d2 = if q == k {
                        grid::d2_at(grid, &strides, x, node, coords, q)
                    } else {
                        grid::d11_at(grid, &strides, x, node, coords, q, k)
                    };
                    lv += nu * aqk * d2;
                }
            }
            let _ = nn;
            let b_blk = geometry.coeff_b.at(node);
            for (k, &bk) in b_blk.iter().enumerate() {
                if bk != 0.0 {
                    lv += bk * grid::d1_at(grid, &strides, x, node, coords, k);
                }
            }
        }
        for (k, wk) in w.iter().enumerate() {
            if !wk.is_empty() {
                let wv = wk[node];
                if wv != 0.0 {
                    lv -= wv * grid::d1_at(grid, &strides, x, node, coords, k);
                }
            }
        }
        *yv = x[node] - dtau * rho * lv;
    }
}

/// Implicit-Euler trajectory over [tau_start, tau_start + 1]:
/// substeps+1 fields including the initial one.
pub fn parabolic_step(problem: &ParabolicStepProblem<'_>) -> Result<Vec<ChartField>> {
    let geometry = problem.geometry;
    let grid = &geometry.grid;
    let len = grid.len();
    let m_tau = problem.substeps;
    assert!(m_tau >= 1, "need at least one substep");
    let dtau = 1.0 / m_tau as f64;
    if let Some(src) = problem.source {
        assert_eq!(src.len(), m_tau + 1, "source needs all tau levels");
    }
    if let Some(bd) = problem.boundary {
        assert_eq!(bd.len(), m_tau + 1, "boundary data needs all tau levels");
    }
    let boundary_nodes = if problem.boundary.is_some() {
        grid.boundary_nodes()
    } else {
        Vec::new()
    };

    let mut levels = Vec::with_capacity(m_tau + 1);
    let mut current = problem.initial.clone();
    current.tau = problem.tau_start;
    levels.push(current.clone());

    let empty: Vec<f64> = Vec::new();
    let mut rhs = vec![0.0; len];
    for q in 1..=m_tau {
        let tau_q = problem.tau_start + q as f64 * dtau;
        // rhs = v_{q-1} + dtau rho src_q (boundary rows replaced below)
        rhs.copy_from_slice(&current.values);
        if let Some(src) = problem.source {
            for (r, s) in rhs.iter_mut().zip(&src[q]) {
                *r += dtau * problem.rho * s;
            }
        }
        if let Some(bd) = problem.boundary {
            for (slot, &node) in boundary_nodes.iter().enumerate() {
                rhs[node] = bd[q][slot];
            }
        }
        let w: Vec<&[f64]> = match problem.convection {
            Some(conv) => conv[q].iter().map(|v| v.as_slice()).collect(),
            None => (0..grid.ndim()).map(|_| empty.as_slice()).collect(),
        };
        let dirichlet = problem.boundary.is_some();
        let mut x = current.values.clone(); // warm start from previous level
        let stats = linalg::bicgstab(
            |p, y| apply_implicit(geometry, problem.nu, problem.rho, dtau, &w, dirichlet, p, y),
            &rhs,
            &mut x,
            problem.rel_tol,
            problem.max_iter,
        );
        if !stats.converged {
            return Err(Error::SolverFailure {
                chart: grid.chart_id,
                reason: format!(
                    "parabolic substep {q} stalled at residual {} after {} iterations",
                    stats.residual, stats.iterations
                ),
            });
        }
        current.values = x;
        current.tau = tau_q;
        if !current.all_finite() {
            return Err(Error::NonFinite {
                l: 0,
                m: 0,
                p: -1,
                chart: grid.chart_id,
                comp: format!("{}", current.component),
            });
        }
        levels.push(current.clone());
    }
    Ok(levels)
}

/// Apply the homogeneous discrete propagator for `k` substeps (the solver's
/// own kernel), used by the discrete Duhamel identity.
pub fn propagate_homogeneous(
    geometry: &ChartGeometry,
    nu: f64,
    rho: f64,
    substeps_per_unit: usize,
    k: usize,
    field: &ChartField,
) -> Result<ChartField> {
    if k == 0 {
        return Ok(field.clone());
    }
    let mut current = field.clone();
    let dtau = 1.0 / substeps_per_unit as f64;
    let w: Vec<&[f64]> = (0..geometry.grid.ndim()).map(|_| &[][..]).collect();
    for _ in 0..k {
        let rhs = current.values.clone();
        let mut x = current.values.clone();
        let stats = linalg::bicgstab(
            |p, y| apply_implicit(geometry, nu, rho, dtau, &w, false, p, y),
            &rhs,
            &mut x,
            1e-13,
            10_000,
        );
        if !stats.converged {
            return Err(Error::SolverFailure {
                chart: geometry.grid.chart_id,
                reason: "homogeneous propagation stalled".into(),
            });
        }
        current.values = x;
    }
    Ok(current)
}

/// det(a) accessor used by tests of the kernel normalization.
pub fn kernel_det(a: &[f64], n: usize) -> f64 {
    sym_det(n, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_torus_atlas, ChartGeometry};
    use crate::grid::{ChartField, Component};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn torus_chart(res: usize) -> ChartGeometry {
        build_torus_atlas(2, 1, 0.25, res).unwrap().charts.remove(0)
    }

    #[test]
    fn gaussian_at_origin_2d() {
        let k = GaussianKernel::new(2, vec![1.0, 0.0, 0.0, 1.0], 0.02).unwrap();
        let dt = 0.7;
        let v = k.eval(dt, &[0.0, 0.0]).unwrap();
        let expect = 1.0 / (4.0 * PI * 0.02 * dt);
        assert_abs_diff_eq!(v, expect, epsilon = 1e-12 * expect);
    }

    #[test]
    fn gaussian_mass_one() {
        for (rho_nu, dt) in [(0.05, 1.0), (0.01, 0.25), (0.3, 2.0)] {
            let k = GaussianKernel::new(2, vec![1.0, 0.0, 0.0, 1.0], rho_nu).unwrap();
            let mass = k.quadrature_mass(dt, 201).unwrap();
            assert!((mass - 1.0).abs() <= 1e-6, "mass {mass} at rho_nu={rho_nu}");
        }
        // anisotropic diffusion matrix
        let k = GaussianKernel::new(2, vec![2.0, 0.4, 0.4, 1.0], 0.05).unwrap();
        let mass = k.quadrature_mass(1.0, 241).unwrap();
        assert!((mass - 1.0).abs() <= 1e-6, "anisotropic mass {mass}");
    }

    #[test]
    fn gaussian_positive_and_dt_guard() {
        let k = GaussianKernel::new(2, vec![1.0, 0.0, 0.0, 1.0], 0.1).unwrap();
        assert!(k.eval(0.5, &[0.3, -0.2]).unwrap() > 0.0);
        assert!(k.eval(0.0, &[0.0, 0.0]).is_err());
        assert!(k.eval(-1.0, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn gaussian_heat_residual_small() {
        // finite-difference residual of d_tau N - rho nu Lap N
        let rho_nu = 0.05;
        let k = GaussianKernel::new(2, vec![1.0, 0.0, 0.0, 1.0], rho_nu).unwrap();
        for (dt, dx) in [(0.5, [0.1, 0.05]), (1.0, [0.0, 0.2]), (0.25, [-0.1, 0.1])] {
            let ht = 1e-5 * dt;
            let hx = 1e-4;
            let n0 = k.eval(dt, &dx).unwrap();
            let dndt = (k.eval(dt + ht, &dx).unwrap() - k.eval(dt - ht, &dx).unwrap()) / (2.0 * ht);
            let mut lap = 0.0;
            for a in 0..2 {
                let mut up = dx;
                up[a] += hx;
                let mut dn = dx;
                dn[a] -= hx;
                lap += (k.eval(dt, &up).unwrap() - 2.0 * n0 + k.eval(dt, &dn).unwrap()) / (hx * hx);
            }
            let resid = (dndt - rho_nu * lap).abs();
            assert!(resid <= 1e-4 * n0.max(1.0), "residual {resid} at dt={dt}");
        }
    }

    #[test]
    fn levy_zero_drift_is_exact_gaussian() {
        let k = GaussianKernel::new(2, vec![1.0, 0.0, 0.0, 1.0], 0.05).unwrap();
        let levy = levy_expansion(k.clone(), vec![0.0, 0.0], 2, 0.01).unwrap();
        for (dt, dx) in [(0.5, [0.1, 0.0]), (1.0, [0.2, -0.3])] {
            assert_eq!(levy.eval(dt, &dx).unwrap(), k.eval(dt, &dx).unwrap());
        }
    }

    #[test]
    fn levy_corrections_shrink_for_small_rho() {
        let rho = 0.02;
        let k = GaussianKernel::new(2, vec![1.0, 0.0, 0.0, 1.0], rho * 1.0).unwrap();
        let levy = levy_expansion(k, vec![0.8, -0.5], 2, rho).unwrap();
        for (dt, dx) in [(1.0, [0.05, 0.02]), (0.5, [0.0, 0.1])] {
            let t1 = levy.correction_term(1, dt, &dx).abs();
            let t2 = levy.correction_term(2, dt, &dx).abs();
            assert!(
                t2 < t1,
                "perturbation ordering violated: |t2|={t2} >= |t1|={t1} at dt={dt}"
            );
        }
    }

    #[test]
    fn levy_small_rho_limit_is_gaussian() {
        let rho = 1e-4;
        let k = GaussianKernel::new(2, vec![1.0, 0.0, 0.0, 1.0], rho).unwrap();
        let levy = levy_expansion(k.clone(), vec![0.7, 0.3], 1, rho).unwrap();
        let dt = 1.0;
        let dx = [0.005, -0.003];
        let base = k.eval(dt, &dx).unwrap();
        let corrected = levy.eval(dt, &dx).unwrap();
        let ratio = corrected / base;
        assert!((ratio - 1.0).abs() <= 1e-3, "ratio {ratio}");
    }

    #[test]
    fn levy_term_cap() {
        let k = GaussianKernel::new(2, vec![1.0, 0.0, 0.0, 1.0], 0.05).unwrap();
        assert!(levy_expansion(k, vec![0.0, 0.0], 4, 0.01).is_err());
    }

    #[test]
    fn constants_preserved_exactly() {
        for chart in [torus_chart(16), {
            // boxed chart with one-sided closure
            let atlas = build_torus_atlas(2, 2, 0.25, 16).unwrap();
            atlas.charts[0].clone()
        }] {
            let initial = ChartField::from_fn(chart.grid.clone(), Component::Velocity(0), 0.0, |_| 3.25);
            let problem = ParabolicStepProblem::homogeneous(&chart, 0.5, 0.01, 4, &initial);
            let levels = parabolic_step(&problem).unwrap();
            for lvl in &levels {
                for v in &lvl.values {
                    assert_eq!(*v, 3.25);
                }
            }
        }
    }

    #[test]
    fn heat_decay_matches_fourier_oracle() {
        let chart = torus_chart(64);
        let rho = 0.02;
        let nu = 1.0;
        let initial = ChartField::from_fn(chart.grid.clone(), Component::Velocity(0), 0.0, |x| {
            (2.0 * PI * x[0]).sin()
        });
        let mut errs = Vec::new();
        for m_tau in [8usize, 16] {
            let problem = ParabolicStepProblem::homogeneous(&chart, nu, rho, m_tau, &initial);
            let levels = parabolic_step(&problem).unwrap();
            let last = levels.last().unwrap();
            let exact = (-rho * nu * 4.0 * PI * PI).exp();
            // compare amplitude at the quarter point where sin = 1
            let grid = &chart.grid;
            let idx = grid.index_of(&[16, 0]);
            let err = (last.values[idx] - exact).abs();
            errs.push(err);
        }
        assert!(errs[1] < errs[0], "halving dtau should shrink the error: {errs:?}");
        assert!(errs[1] < 2e-2, "errs {errs:?}");
    }

    #[test]
    fn manufactured_solution_recovered() {
        // v*(tau, x) = tau sin(2 pi x0); source = d_tau v* - rho nu Lap v* + rho w . grad v*
        // with w constant; the solver sees source already divided by rho.
        let chart = torus_chart(48);
        let rho = 0.05;
        let nu = 0.4;
        let w = [0.3, -0.2];
        let m_tau = 32;
        let grid = chart.grid.clone();
        let initial = ChartField::zeros(grid.clone(), Component::Velocity(0), 0.0);
        let mut source = Vec::with_capacity(m_tau + 1);
        for q in 0..=m_tau {
            let tau = q as f64 / m_tau as f64;
            let f = ChartField::from_fn(grid.clone(), Component::Scalar, tau, |x| {
                let s = (2.0 * PI * x[0]).sin();
                let c = (2.0 * PI * x[0]).cos();
                // (1/rho) d_tau v* - nu Lap v* + w . grad v*
                s / rho + nu * 4.0 * PI * PI * tau * s + w[0] * tau * 2.0 * PI * c
            });
            source.push(f.values);
        }
        let conv: Vec<Vec<Vec<f64>>> = (0..=m_tau)
            .map(|_| {
                vec![
                    vec![w[0]; grid.len()],
                    vec![w[1]; grid.len()],
                ]
            })
            .collect();
        let problem = ParabolicStepProblem {
            geometry: &chart,
            nu,
            rho,
            substeps: m_tau,
            tau_start: 0.0,
            initial: &initial,
            source: Some(&source),
            convection: Some(&conv),
            boundary: None,
            rel_tol: 1e-12,
            max_iter: 10_000,
        };
        let levels = parabolic_step(&problem).unwrap();
        let last = levels.last().unwrap();
        let exact = ChartField::from_fn(grid, Component::Scalar, 1.0, |x| (2.0 * PI * x[0]).sin());
        let err = last
            .values
            .iter()
            .zip(&exact.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 2e-2, "MMS error {err}");
    }

    #[test]
    fn sup_norm_non_increasing_without_convection() {
        let chart = torus_chart(24);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut initial = ChartField::zeros(chart.grid.clone(), Component::Velocity(0), 0.0);
        for v in initial.values.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let problem = ParabolicStepProblem::homogeneous(&chart, 1.0, 0.5, 8, &initial);
        let levels = parabolic_step(&problem).unwrap();
        let mut prev = f64::INFINITY;
        for lvl in &levels {
            let s = lvl.sup_norm();
            assert!(s <= prev + 1e-12, "sup grew: {s} > {prev}");
            prev = s;
        }
    }

    #[test]
    fn discrete_duhamel_identity() {
        let chart = torus_chart(24);
        let rho = 0.05;
        let nu = 0.5;
        let m_tau = 4;
        let grid = chart.grid.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut initial = ChartField::zeros(grid.clone(), Component::Velocity(0), 0.0);
        for v in initial.values.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let source: Vec<Vec<f64>> = (0..=m_tau)
            .map(|_| (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let problem = ParabolicStepProblem {
            geometry: &chart,
            nu,
            rho,
            substeps: m_tau,
            tau_start: 0.0,
            initial: &initial,
            source: Some(&source),
            convection: None,
            boundary: None,
            rel_tol: 1e-13,
            max_iter: 10_000,
        };
        let levels = parabolic_step(&problem).unwrap();
        let direct = levels.last().unwrap();

        // v_M = E^M v_0 + dtau rho sum_q E^{M-q+1} src_q
        let dtau = 1.0 / m_tau as f64;
        let mut duhamel = propagate_homogeneous(&chart, nu, rho, m_tau, m_tau, &initial).unwrap();
        for q in 1..=m_tau {
            let sfield = ChartField {
                grid: grid.clone(),
                component: Component::Scalar,
                values: source[q].clone(),
                tau: 0.0,
            };
            let prop = propagate_homogeneous(&chart, nu, rho, m_tau, m_tau - q + 1, &sfield).unwrap();
            duhamel.scaled_add(dtau * rho, &prop);
        }
        let err = direct
            .values
            .iter()
            .zip(&duhamel.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-6, "Duhamel defect {err}");
    }

    #[test]
    fn small_rho_step_stays_near_data() {
        let chart = torus_chart(32);
        let initial = ChartField::from_fn(chart.grid.clone(), Component::Velocity(0), 0.0, |x| {
            (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos()
        });
        let mut deltas = Vec::new();
        for rho in [1e-2, 5e-3] {
            let problem = ParabolicStepProblem::homogeneous(&chart, 1.0, rho, 8, &initial);
            let levels = parabolic_step(&problem).unwrap();
            let last = levels.last().unwrap();
            let d = last
                .values
                .iter()
                .zip(&initial.values)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            deltas.push(d);
        }
        let ratio = deltas[0] / deltas[1];
        assert!(
            (1.5..=2.5).contains(&ratio),
            "increment should scale linearly in rho: {deltas:?}"
        );
    }
}
