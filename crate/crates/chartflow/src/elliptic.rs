//! Per-chart Poisson solves for the pressure.
//!
//! The production path is a matrix-free conjugate-gradient solve of the
//! Dirichlet problem `op(p) = f` in the interior, `p = g` on the chart
//! boundary (fully periodic charts have no boundary; the constant nullspace
//! is gauged to zero mean). The dense Green-matrix path materializes the same
//! inverse column by column and exists to cross-validate the convolution
//! representation literally.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::ChartGeometry;
use crate::grid::{self, ChartField, ChartGrid, Component};
use crate::linalg;

/// Which elliptic operator acts on the pressure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PressureOperator {
    /// Plain Laplacian (locally flat coefficients).
    Laplace,
    /// div(a grad p), self-adjoint form for variable coefficients.
    DivAGrad,
}

/// One chart's Dirichlet pressure problem: `op(p) = f` inside, `p = g` on the
/// boundary nodes (ordered as [`ChartGrid::boundary_nodes`]).
pub struct DirichletProblem<'a> {
    pub geometry: &'a ChartGeometry,
    pub operator: PressureOperator,
    /// Interior source, full-grid layout (boundary entries ignored).
    pub rhs: &'a [f64],
    /// Boundary values, one per boundary node; empty on periodic charts.
    pub boundary: &'a [f64],
}

/// Both halves of the split solution: `p1` solves with g = 0, `p2` with
/// f = 0; the pressure is their sum.
pub struct PressureSplit {
    pub p1: ChartField,
    pub p2: ChartField,
    pub pressure: ChartField,
}

/// Cached per-chart solve context (node classification plus face-averaged
/// coefficients); shareable read-only across threads.
pub struct PoissonSolver {
    grid: Arc<ChartGrid>,
    operator: PressureOperator,
    interior: Vec<usize>,
    /// full index -> interior slot, or usize::MAX
    interior_slot: Vec<usize>,
    boundary: Vec<usize>,
    /// a_{jk} per node (n*n), copied out of the geometry for DivAGrad.
    coeff_a: Vec<f64>,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl PoissonSolver {
    pub fn new(geometry: &ChartGeometry, operator: PressureOperator) -> Self {
        let grid = geometry.grid.clone();
        let len = grid.len();
        let boundary = grid.boundary_nodes();
        let mut is_boundary = vec![false; len];
        for &b in &boundary {
            is_boundary[b] = true;
        }
        let interior: Vec<usize> = (0..len).filter(|&i| !is_boundary[i]).collect();
        let mut interior_slot = vec![usize::MAX; len];
        for (s, &i) in interior.iter().enumerate() {
            interior_slot[i] = s;
        }
        PoissonSolver {
            grid,
            operator,
            interior,
            interior_slot,
            boundary,
            coeff_a: geometry.coeff_a.data.clone(),
            rel_tol: 1e-12,
            max_iter: 20_000,
        }
    }

    pub fn grid(&self) -> &Arc<ChartGrid> {
        &self.grid
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary
    }

    pub fn interior_len(&self) -> usize {
        self.interior.len()
    }

    fn is_periodic(&self) -> bool {
        self.boundary.is_empty()
    }

    /// y = -op(x) restricted to interior slots; `full` is scratch holding the
    /// full-grid extension of x with the given boundary values.
    fn apply_neg_op(&self, x: &[f64], g: &[f64], full: &mut [f64], y: &mut [f64]) {
        let grid = &self.grid;
        let n = grid.ndim();
        let strides = grid.strides();
        if self.is_periodic() {
            full.copy_from_slice(x);
        } else {
            for (slot, &node) in self.interior.iter().enumerate() {
                full[node] = x[slot];
            }
            for (slot, &node) in self.boundary.iter().enumerate() {
                full[node] = g[slot];
            }
        }
        let mut coords = vec![0usize; n];
        for (slot, &node) in self.interior.iter().enumerate() {
            let mut rem = node;
            for a in 0..n {
                coords[a] = rem / strides[a];
                rem %= strides[a];
            }
            let val = match self.operator {
                PressureOperator::Laplace => {
                    let mut lap = 0.0;
                    for a in 0..n {
                        lap += grid::d2_at(grid, &strides, full, node, &coords, a);
                    }
                    lap
                }
                PressureOperator::DivAGrad => {
                    self.div_a_grad_at(full, node, &coords, &strides)
                }
            };
            y[slot] = -val;
        }
    }

    /// div(a grad p) at one interior node: flux form for the diagonal of a,
    /// centered composition for off-diagonal entries.
    fn div_a_grad_at(&self, full: &[f64], node: usize, coords: &[usize], strides: &[usize]) -> f64 {
        let grid = &self.grid;
        let n = grid.ndim();
        let h = grid.spacing;
        let nn = n * n;
        let a_of = |idx: usize, j: usize, k: usize| self.coeff_a[idx * nn + j * n + k];
        let shift = |idx: usize, axis: usize, off: i64| -> usize {
            let c = coords[axis] as i64 + off;
            let d = grid.dims[axis] as i64;
            let c = if grid.periodic[axis] { c.rem_euclid(d) } else { c };
            (idx as i64 + (c - coords[axis] as i64) * strides[axis] as i64) as usize
        };
        let mut acc = 0.0;
        for j in 0..n {
            let up = shift(node, j, 1);
            let dn = shift(node, j, -1);
            let a_up = 0.5 * (a_of(node, j, j) + a_of(up, j, j));
            let a_dn = 0.5 * (a_of(node, j, j) + a_of(dn, j, j));
            acc += (a_up * (full[up] - full[node]) - a_dn * (full[node] - full[dn])) / (h * h);
            for k in 0..n {
                if k == j {
                    continue;
                }
                // d_j ( a_jk d_k p ), centered in j with centered d_k inside
                let dk = |idx: usize, cj: &[usize]| -> f64 {
                    let u = {
                        let c = cj[k] as i64 + 1;
                        let d = grid.dims[k] as i64;
                        let c = if grid.periodic[k] { c.rem_euclid(d) } else { c };
                        (idx as i64 + (c - cj[k] as i64) * strides[k] as i64) as usize
                    };
                    let l = {
                        let c = cj[k] as i64 - 1;
                        let d = grid.dims[k] as i64;
                        let c = if grid.periodic[k] { c.rem_euclid(d) } else { c };
                        (idx as i64 + (c - cj[k] as i64) * strides[k] as i64) as usize
                    };
                    (full[u] - full[l]) / (2.0 * h)
                };
                let mut cj_up = coords.to_vec();
                cj_up[j] = {
                    let c = coords[j] as i64 + 1;
                    let d = grid.dims[j] as i64;
                    (if grid.periodic[j] { c.rem_euclid(d) } else { c }) as usize
                };
                let mut cj_dn = coords.to_vec();
                cj_dn[j] = {
                    let c = coords[j] as i64 - 1;
                    let d = grid.dims[j] as i64;
                    (if grid.periodic[j] { c.rem_euclid(d) } else { c }) as usize
                };
                let q_up = a_of(shift(node, j, 1), j, k) * dk(shift(node, j, 1), &cj_up);
                let q_dn = a_of(shift(node, j, -1), j, k) * dk(shift(node, j, -1), &cj_dn);
                acc += (q_up - q_dn) / (2.0 * h);
            }
        }
        acc
    }

    /// Solve `op(p) = f` with `p = g` on the boundary. `warm` seeds the CG
    /// iteration with a previous pressure (full-grid layout).
    ///
    /// Periodic charts: the compatible part of `f` is solved for and the
    /// result is gauged to zero mean.
    pub fn solve(&self, f: &[f64], g: &[f64], warm: Option<&[f64]>) -> Result<Vec<f64>> {
        let len = self.grid.len();
        assert_eq!(f.len(), len);
        assert_eq!(g.len(), self.boundary.len());
        let ni = self.interior.len();
        let mut rhs = vec![0.0; ni];
        let mut full = vec![0.0; len];
        let zero_g = vec![0.0; self.boundary.len()];

        // rhs of  -op(p_int) = -f + boundary coupling
        // split: -op(p) = -f with p = g  <=>  -op(p0) = -f + op(G ext) ... the
        // coupling is realized by applying -op to the g-extension of zero.
        for (slot, &node) in self.interior.iter().enumerate() {
            rhs[slot] = -f[node];
        }
        if !self.boundary.is_empty() {
            // subtract -op applied to the boundary extension (interior = 0)
            let zeros = vec![0.0; ni];
            let mut coupling = vec![0.0; ni];
            self.apply_neg_op(&zeros, g, &mut full, &mut coupling);
            for slot in 0..ni {
                rhs[slot] -= coupling[slot];
            }
        }

        let mut x = vec![0.0; ni];
        if let Some(w) = warm {
            for (slot, &node) in self.interior.iter().enumerate() {
                x[slot] = w[node];
            }
        }

        let periodic = self.is_periodic();
        let project = |v: &mut [f64]| {
            if periodic {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                for vi in v.iter_mut() {
                    *vi -= mean;
                }
            }
        };
        project(&mut rhs);

        let full_cell = std::cell::RefCell::new(vec![0.0; len]);
        let stats = linalg::conjugate_gradient(
            |p, y| {
                let mut fb = full_cell.borrow_mut();
                self.apply_neg_op(p, &zero_g, &mut fb, y);
            },
            &rhs,
            &mut x,
            self.rel_tol,
            self.max_iter,
            project,
        );
        if !stats.converged {
            return Err(Error::SolverFailure {
                chart: self.grid.chart_id,
                reason: format!(
                    "pressure CG stalled at residual {} after {} iterations",
                    stats.residual, stats.iterations
                ),
            });
        }
        let mut out = vec![0.0; len];
        for (slot, &node) in self.interior.iter().enumerate() {
            out[node] = x[slot];
        }
        for (slot, &node) in self.boundary.iter().enumerate() {
            out[node] = g[slot];
        }
        Ok(out)
    }
}

/// Solve the Dirichlet problem exposing the p1 (g = 0) and p2 (f = 0) parts.
pub fn solve_dirichlet(problem: &DirichletProblem<'_>) -> Result<PressureSplit> {
    let solver = PoissonSolver::new(problem.geometry, problem.operator);
    solve_dirichlet_with(&solver, problem.rhs, problem.boundary)
}

/// As [`solve_dirichlet`] but reusing a cached solver.
pub fn solve_dirichlet_with(
    solver: &PoissonSolver,
    rhs: &[f64],
    boundary: &[f64],
) -> Result<PressureSplit> {
    let grid = solver.grid().clone();
    let zero_g = vec![0.0; solver.boundary_nodes().len()];
    let zero_f = vec![0.0; grid.len()];
    let p1 = solver.solve(rhs, &zero_g, None)?;
    let p2 = if boundary.iter().any(|&b| b != 0.0) {
        solver.solve(&zero_f, boundary, None)?
    } else {
        zero_f.clone()
    };
    let mut total = p1.clone();
    for (t, b) in total.iter_mut().zip(&p2) {
        *t += b;
    }
    let mk = |values: Vec<f64>| ChartField {
        grid: grid.clone(),
        component: Component::Pressure,
        values,
        tau: 0.0,
    };
    Ok(PressureSplit {
        p1: mk(p1),
        p2: mk(p2),
        pressure: mk(total),
    })
}

/// Pressure gradient via the grid stencils, one field per axis.
pub fn leray_gradient(pressure: &ChartField) -> Vec<ChartField> {
    (0..pressure.grid.ndim())
        .map(|axis| grid::partial(pressure, axis))
        .collect()
}

/// Dense discrete Green operator of one chart, for testing the convolution
/// representation literally.
#[derive(Debug)]
pub struct GreenMatrix {
    pub chart_id: usize,
    pub interior: Vec<usize>,
    pub boundary: Vec<usize>,
    /// n_int x n_int, row-major: p_interior = interior_block * f_interior (+ boundary part).
    pub interior_block: Vec<f64>,
    /// n_int x n_bd: discrete Poisson kernel applied to boundary data.
    pub boundary_block: Vec<f64>,
}

pub const GREEN_SIZE_GUARD: usize = 10_000;

/// Materialize the inverse of the interior operator column by column
/// (unit sources with g = 0) and the boundary-to-interior map (f = 0, unit
/// boundary data). Guarded to charts with at most 10^4 interior nodes.
pub fn assemble_green_matrix(
    geometry: &ChartGeometry,
    operator: PressureOperator,
) -> Result<GreenMatrix> {
    let solver = PoissonSolver::new(geometry, operator);
    let grid = solver.grid().clone();
    let ni = solver.interior_len();
    let nb = solver.boundary_nodes().len();
    if nb == 0 {
        return Err(Error::Grid(
            "Green matrix needs a chart with boundary (periodic charts have none)".into(),
        ));
    }
    if ni > GREEN_SIZE_GUARD {
        return Err(Error::SizeGuard {
            chart: grid.chart_id,
            interior: ni,
            limit: GREEN_SIZE_GUARD,
        });
    }

    // dense interior operator A = -op restricted to interior unknowns
    let mut dense = vec![0.0; ni * ni];
    let mut full = vec![0.0; grid.len()];
    let zero_g = vec![0.0; nb];
    let mut col_in = vec![0.0; ni];
    let mut col_out = vec![0.0; ni];
    for c in 0..ni {
        col_in.iter_mut().for_each(|v| *v = 0.0);
        col_in[c] = 1.0;
        solver.apply_neg_op(&col_in, &zero_g, &mut full, &mut col_out);
        for r in 0..ni {
            dense[r * ni + c] = col_out[r];
        }
    }
    let mut piv = vec![0usize; ni];
    if !linalg::lu_factor(ni, &mut dense, &mut piv) {
        return Err(Error::SolverFailure {
            chart: grid.chart_id,
            reason: "singular discrete operator while assembling Green matrix".into(),
        });
    }

    // interior block: p = -A^{-1} f  (solve op(p) = e_c, g = 0)
    let mut interior_block = vec![0.0; ni * ni];
    let mut b = vec![0.0; ni];
    for c in 0..ni {
        b.iter_mut().for_each(|v| *v = 0.0);
        b[c] = -1.0;
        linalg::lu_solve(ni, &dense, &piv, &mut b);
        for r in 0..ni {
            interior_block[r * ni + c] = b[r];
        }
    }

    // boundary block: p = A^{-1} (coupling of g); coupling computed by
    // applying -op to the pure boundary extension
    let mut boundary_block = vec![0.0; ni * nb];
    let zeros = vec![0.0; ni];
    let mut g = vec![0.0; nb];
    for c in 0..nb {
        g.iter_mut().for_each(|v| *v = 0.0);
        g[c] = 1.0;
        solver.apply_neg_op(&zeros, &g, &mut full, &mut col_out);
        for v in col_out.iter_mut() {
            *v = -*v;
        }
        linalg::lu_solve(ni, &dense, &piv, &mut col_out);
        for r in 0..ni {
            boundary_block[r * nb + c] = col_out[r];
        }
    }
    Ok(GreenMatrix {
        chart_id: grid.chart_id,
        interior: (0..grid.len())
            .filter(|&i| solver.interior_slot[i] != usize::MAX)
            .collect(),
        boundary: solver.boundary_nodes().to_vec(),
        interior_block,
        boundary_block,
    })
}

impl GreenMatrix {
    /// Apply the convolution representation: p = B_int f + B_bd g, returned
    /// in full-grid layout with the boundary filled from g.
    pub fn convolve(&self, grid: &Arc<ChartGrid>, f: &[f64], g: &[f64]) -> Vec<f64> {
        let ni = self.interior.len();
        let nb = self.boundary.len();
        let mut out = vec![0.0; grid.len()];
        for (r, &node) in self.interior.iter().enumerate() {
            let mut acc = 0.0;
            for (c, &fc) in self.interior.iter().enumerate() {
                acc += self.interior_block[r * ni + c] * f[fc];
            }
            for c in 0..nb {
                acc += self.boundary_block[r * nb + c] * g[c];
            }
            out[node] = acc;
        }
        for (c, &node) in self.boundary.iter().enumerate() {
            out[node] = g[c];
        }
        out
    }
}
