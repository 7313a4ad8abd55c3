//! Charts, metrics, operator coefficients, Christoffel symbols, and the atlas
//! of overlapping boxes on the unit torus with a subordinate partition of
//! unity.
//!
//! Charts are congruent axis-aligned boxes with grid-aligned overlaps, so all
//! chart-to-chart communication is exact index shifting on one global lattice.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{ChartField, ChartGrid, Component};
use crate::linalg::{sym_inverse, sym_min_eig};

/// Per-node blocks of `comps` reals on a chart grid (metric, coefficients,
/// Christoffel symbols).
#[derive(Debug, Clone)]
pub struct TensorGrid {
    pub comps: usize,
    pub data: Vec<f64>,
}

impl TensorGrid {
    pub fn zeros(nodes: usize, comps: usize) -> Self {
        TensorGrid {
            comps,
            data: vec![0.0; nodes * comps],
        }
    }

    #[inline]
    pub fn at(&self, node: usize) -> &[f64] {
        &self.data[node * self.comps..(node + 1) * self.comps]
    }

    #[inline]
    pub fn at_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.data[node * self.comps..(node + 1) * self.comps]
    }
}

/// One chart: its lattice, box extent, metric samples and operator
/// coefficients (with precomputed first derivatives for the Leray source).
#[derive(Debug, Clone)]
pub struct ChartGeometry {
    pub chart_id: usize,
    pub grid: Arc<ChartGrid>,
    pub domain_lo: Vec<f64>,
    pub domain_hi: Vec<f64>,
    /// g_{ij}, n*n per node.
    pub metric: TensorGrid,
    /// a_{jk}, n*n per node.
    pub coeff_a: TensorGrid,
    /// b_k, n per node.
    pub coeff_b: TensorGrid,
    /// Gamma^l_{ij}, n^3 per node, layout [l][i][j].
    pub christoffel: TensorGrid,
    /// d a_{jk} / d x_i, n^3 per node, layout [i][j][k].
    pub coeff_a_grad: TensorGrid,
    /// d b_k / d x_i, n^2 per node, layout [i][k].
    pub coeff_b_grad: TensorGrid,
    /// True when a == identity and b == 0 everywhere (fast paths).
    pub flat_coefficients: bool,
}

impl ChartGeometry {
    pub fn side_lengths(&self) -> Vec<f64> {
        self.domain_lo
            .iter()
            .zip(&self.domain_hi)
            .map(|(lo, hi)| hi - lo)
            .collect()
    }

    /// Minimum eigenvalue of a_{jk} over all nodes.
    pub fn min_ellipticity(&self) -> f64 {
        let n = self.grid.ndim();
        (0..self.grid.len())
            .map(|i| sym_min_eig(n, self.coeff_a.at(i)))
            .fold(f64::INFINITY, f64::min)
    }
}

/// The chart family with neighbor sets and partition-of-unity bumps.
#[derive(Debug, Clone)]
pub struct Atlas {
    pub n: usize,
    pub charts_per_axis: usize,
    /// Lattice nodes per axis on the torus.
    pub global_nodes: usize,
    pub spacing: f64,
    pub charts: Vec<ChartGeometry>,
    /// J_j = { k : U_j and U_k intersect }, includes j itself.
    pub neighbor_sets: Vec<Vec<usize>>,
    /// phi_j sampled on chart j's grid.
    pub bumps: Vec<Vec<f64>>,
    /// Overlap width in lattice cells on each side of a chart core.
    pub overlap_cells: usize,
    /// Core cells per chart per axis.
    pub core_cells: usize,
}

fn smoothstep(t: f64) -> f64 {
    // quintic plateau ramp: zero value / first / second derivative at 0,
    // matching S(t) + S(1-t) = 1
    let t = t.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

/// 1D bump along one axis of a boxed chart: 0 at the chart edge, rising over
/// the 2*o overlap strip, 1 on the plateau.
fn axis_bump(local: usize, cells: usize, o: usize) -> f64 {
    let ramp = 2 * o;
    if local <= ramp {
        smoothstep(local as f64 / ramp as f64)
    } else if local >= cells - ramp {
        smoothstep((cells - local) as f64 / ramp as f64)
    } else {
        1.0
    }
}

/// Cover the unit torus [0,1)^n by `charts_per_axis`^n congruent overlapping
/// boxes with `resolution` nodes per axis per chart.
///
/// With one chart per axis the chart is the torus itself (periodic, no
/// boundary, bump identically 1). With c >= 2 each chart owns a core of
/// `k_core` lattice cells extended by `o` cells of overlap on each side,
/// where `o` realizes `overlap_fraction` on the lattice.
pub fn build_torus_atlas(
    n: usize,
    charts_per_axis: usize,
    overlap_fraction: f64,
    resolution: usize,
) -> Result<Atlas> {
    if !(2..=3).contains(&n) {
        return Err(Error::Config {
            field: "n".into(),
            reason: format!("dimension must be 2 or 3, got {n}"),
        });
    }
    if resolution < 8 {
        return Err(Error::Config {
            field: "resolution".into(),
            reason: format!("need >= 8 nodes per axis, got {resolution}"),
        });
    }
    if !(overlap_fraction > 0.0 && overlap_fraction < 0.5) {
        return Err(Error::Config {
            field: "overlap_fraction".into(),
            reason: format!("must lie in (0, 0.5), got {overlap_fraction}"),
        });
    }
    if charts_per_axis == 0 {
        return Err(Error::Config {
            field: "charts_per_axis".into(),
            reason: "must be >= 1".into(),
        });
    }

    let c = charts_per_axis;
    if c == 1 {
        // single periodic chart covering the torus
        let big_n = resolution;
        let grid = Arc::new(ChartGrid {
            chart_id: 0,
            dims: vec![big_n; n],
            spacing: 1.0 / big_n as f64,
            periodic: vec![true; n],
            origin: vec![0.0; n],
            global_offset: vec![0; n],
            global_nodes: big_n,
        });
        let nodes = grid.len();
        let chart = ChartGeometry {
            chart_id: 0,
            grid,
            domain_lo: vec![0.0; n],
            domain_hi: vec![1.0; n],
            metric: identity_metric(nodes, n),
            coeff_a: identity_metric(nodes, n),
            coeff_b: TensorGrid::zeros(nodes, n),
            christoffel: TensorGrid::zeros(nodes, n * n * n),
            coeff_a_grad: TensorGrid::zeros(nodes, n * n * n),
            coeff_b_grad: TensorGrid::zeros(nodes, n * n),
            flat_coefficients: true,
        };
        return Ok(Atlas {
            n,
            charts_per_axis: 1,
            global_nodes: big_n,
            spacing: 1.0 / big_n as f64,
            charts: vec![chart],
            neighbor_sets: vec![vec![0]],
            bumps: vec![vec![1.0; nodes]],
            overlap_cells: 0,
            core_cells: big_n,
        });
    }

    // lattice realization of the overlap fraction
    let cells = resolution - 1;
    let o = ((overlap_fraction * cells as f64) / (1.0 + 2.0 * overlap_fraction)).round() as usize;
    if o < 1 {
        return Err(Error::Atlas(
            "overlap too small to cover chart boundaries (overlap_fraction * resolution rounds to zero cells)"
                .into(),
        ));
    }
    if o < 2 {
        return Err(Error::Atlas(
            "resolution too coarse for bump smoothness (need >= 2 overlap cells)".into(),
        ));
    }
    if cells <= 2 * o {
        return Err(Error::Atlas(format!(
            "no core cells left: {cells} cells per chart, overlap {o} on each side"
        )));
    }
    let k_core = cells - 2 * o;
    if 2 * o >= k_core {
        return Err(Error::Atlas(format!(
            "overlap {o} cells too wide for core {k_core}: charts would overlap non-adjacent charts"
        )));
    }
    let big_n = c * k_core;
    let h = 1.0 / big_n as f64;

    let n_charts = c.pow(n as u32);
    let mut charts = Vec::with_capacity(n_charts);
    let mut bumps = Vec::with_capacity(n_charts);
    for chart_id in 0..n_charts {
        // chart multi-index, row-major
        let mut q = vec![0usize; n];
        let mut rem = chart_id;
        for a in (0..n).rev() {
            q[a] = rem % c;
            rem /= c;
        }
        let offset: Vec<i64> = q
            .iter()
            .map(|&qa| qa as i64 * k_core as i64 - o as i64)
            .collect();
        let origin: Vec<f64> = offset.iter().map(|&g| g as f64 * h).collect();
        let grid = Arc::new(ChartGrid {
            chart_id,
            dims: vec![cells + 1; n],
            spacing: h,
            periodic: vec![false; n],
            origin: origin.clone(),
            global_offset: offset,
            global_nodes: big_n,
        });
        let nodes = grid.len();

        // tensor-product bump, then normalized against the family below
        let mut bump = vec![1.0; nodes];
        for (idx, b) in bump.iter_mut().enumerate() {
            let coords = grid.coords_of(idx);
            for &ca in &coords {
                *b *= axis_bump(ca, cells, o);
            }
        }
        bumps.push(bump);

        let domain_hi: Vec<f64> = origin.iter().map(|lo| lo + cells as f64 * h).collect();
        charts.push(ChartGeometry {
            chart_id,
            grid,
            domain_lo: origin,
            domain_hi,
            metric: identity_metric(nodes, n),
            coeff_a: identity_metric(nodes, n),
            coeff_b: TensorGrid::zeros(nodes, n),
            christoffel: TensorGrid::zeros(nodes, n * n * n),
            coeff_a_grad: TensorGrid::zeros(nodes, n * n * n),
            coeff_b_grad: TensorGrid::zeros(nodes, n * n),
            flat_coefficients: true,
        });
    }

    // normalize the partition of unity by the pointwise global sum
    let global_len = big_n.pow(n as u32);
    let mut total = vec![0.0f64; global_len];
    let mut gc = vec![0i64; n];
    for (chart, bump) in charts.iter().zip(&bumps) {
        for (idx, b) in bump.iter().enumerate() {
            let coords = chart.grid.coords_of(idx);
            chart.grid.global_coord(&coords, &mut gc);
            total[global_index(&gc, big_n)] += b;
        }
    }
    if let Some((i, t)) = total
        .iter()
        .enumerate()
        .find(|(_, &t)| t < 1e-12)
        .map(|(i, t)| (i, *t))
    {
        return Err(Error::Atlas(format!(
            "global node {i} not covered by any bump (sum {t}); overlap too small"
        )));
    }
    for (chart, bump) in charts.iter().zip(bumps.iter_mut()) {
        for (idx, b) in bump.iter_mut().enumerate() {
            let coords = chart.grid.coords_of(idx);
            chart.grid.global_coord(&coords, &mut gc);
            *b /= total[global_index(&gc, big_n)];
        }
    }

    // neighbor sets from per-axis interval intersection on the torus lattice
    let mut neighbor_sets = vec![Vec::new(); n_charts];
    for j in 0..n_charts {
        for k in 0..n_charts {
            if j == k || charts_intersect(&charts[j], &charts[k], big_n) {
                neighbor_sets[j].push(k);
            }
        }
    }

    let atlas = Atlas {
        n,
        charts_per_axis: c,
        global_nodes: big_n,
        spacing: h,
        charts,
        neighbor_sets,
        bumps,
        overlap_cells: o,
        core_cells: k_core,
    };

    // every boundary node of every chart must be strictly interior to a neighbor
    for j in 0..n_charts {
        let grid = &atlas.charts[j].grid;
        for idx in grid.boundary_nodes() {
            let coords = grid.coords_of(idx);
            grid.global_coord(&coords, &mut gc);
            if atlas.interior_cover(j, &gc).is_empty() {
                return Err(Error::Atlas(format!(
                    "boundary node {coords:?} of chart {j} is not interior to any neighbor; \
                     overlap too small to cover chart boundaries"
                )));
            }
        }
    }
    Ok(atlas)
}

fn identity_metric(nodes: usize, n: usize) -> TensorGrid {
    let mut t = TensorGrid::zeros(nodes, n * n);
    for node in 0..nodes {
        let m = t.at_mut(node);
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
    }
    t
}

fn global_index(gc: &[i64], big_n: usize) -> usize {
    let mut idx = 0usize;
    for &g in gc {
        idx = idx * big_n + g as usize;
    }
    idx
}

fn charts_intersect(a: &ChartGeometry, b: &ChartGeometry, big_n: usize) -> bool {
    let n = a.grid.ndim();
    for axis in 0..n {
        let (s1, l1) = (a.grid.global_offset[axis], (a.grid.dims[axis] - 1) as i64);
        let (s2, l2) = (b.grid.global_offset[axis], (b.grid.dims[axis] - 1) as i64);
        // intervals [s, s+l] on Z/big_n: intersect iff the circular gap test fails
        let bn = big_n as i64;
        let d = (s2 - s1).rem_euclid(bn);
        let hit = d <= l1 || (bn - d) <= l2;
        if !hit {
            return false;
        }
    }
    true
}

impl Atlas {
    pub fn chart_grid(&self, j: usize) -> &Arc<ChartGrid> {
        &self.charts[j].grid
    }

    /// Neighbors of chart j excluding j itself.
    pub fn proper_neighbors(&self, j: usize) -> Vec<usize> {
        self.neighbor_sets[j]
            .iter()
            .copied()
            .filter(|&k| k != j)
            .collect()
    }

    /// Translation taking chart-j local coordinates to chart-k local
    /// coordinates (mod 1 on the torus), when the charts are neighbors.
    pub fn transition(&self, j: usize, k: usize) -> Option<Vec<f64>> {
        if !self.neighbor_sets[j].contains(&k) {
            return None;
        }
        let gj = &self.charts[j].grid;
        let gk = &self.charts[k].grid;
        Some(
            gj.global_offset
                .iter()
                .zip(&gk.global_offset)
                .map(|(a, b)| ((a - b).rem_euclid(self.global_nodes as i64)) as f64 * self.spacing)
                .collect(),
        )
    }

    /// Charts (other than `exclude`) whose open interior contains the global
    /// lattice node, with the local node index in each.
    pub fn interior_cover(&self, exclude: usize, gc: &[i64]) -> Vec<(usize, usize)> {
        let bn = self.global_nodes as i64;
        let mut out = Vec::new();
        'chart: for (k, chart) in self.charts.iter().enumerate() {
            if k == exclude {
                continue;
            }
            let grid = &chart.grid;
            let mut idx = 0usize;
            let strides = grid.strides();
            for a in 0..self.n {
                let local = (gc[a] - grid.global_offset[a]).rem_euclid(bn);
                let inside = if grid.periodic[a] {
                    (local as usize) < grid.dims[a]
                } else {
                    local > 0 && (local as usize) < grid.dims[a] - 1
                };
                if !inside {
                    continue 'chart;
                }
                idx += local as usize * strides[a];
            }
            out.push((k, idx));
        }
        out
    }

    /// Local node index of the global lattice node in chart `k`, when covered
    /// (boundary included).
    pub fn local_index(&self, k: usize, gc: &[i64]) -> Option<usize> {
        let grid = &self.charts[k].grid;
        let bn = self.global_nodes as i64;
        let strides = grid.strides();
        let mut idx = 0usize;
        for a in 0..self.n {
            let local = (gc[a] - grid.global_offset[a]).rem_euclid(bn);
            if (local as usize) >= grid.dims[a] {
                return None;
            }
            idx += local as usize * strides[a];
        }
        Some(idx)
    }

    pub fn global_len(&self) -> usize {
        self.global_nodes.pow(self.n as u32)
    }

    /// Blend per-chart fields into one global lattice field with the
    /// partition of unity.
    pub fn assemble_global(&self, fields: &[&ChartField]) -> Vec<f64> {
        assert_eq!(fields.len(), self.charts.len());
        let mut out = vec![0.0f64; self.global_len()];
        let mut gc = vec![0i64; self.n];
        for (j, f) in fields.iter().enumerate() {
            let grid = &self.charts[j].grid;
            debug_assert_eq!(f.grid.chart_id, j);
            for idx in 0..grid.len() {
                let coords = grid.coords_of(idx);
                grid.global_coord(&coords, &mut gc);
                out[global_index(&gc, self.global_nodes)] += self.bumps[j][idx] * f.values[idx];
            }
        }
        out
    }

    /// Exact restriction of a global lattice field to one chart.
    pub fn restrict_to_chart(
        &self,
        global: &[f64],
        j: usize,
        component: Component,
        tau: f64,
    ) -> ChartField {
        let grid = self.charts[j].grid.clone();
        let mut f = ChartField::zeros(grid.clone(), component, tau);
        let mut gc = vec![0i64; self.n];
        for idx in 0..grid.len() {
            let coords = grid.coords_of(idx);
            grid.global_coord(&coords, &mut gc);
            f.values[idx] = global[global_index(&gc, self.global_nodes)];
        }
        f
    }

    /// Max over global nodes of |sum_j phi_j - 1|.
    pub fn partition_defect(&self) -> f64 {
        let mut total = vec![0.0f64; self.global_len()];
        let mut gc = vec![0i64; self.n];
        for (j, bump) in self.bumps.iter().enumerate() {
            let grid = &self.charts[j].grid;
            for (idx, b) in bump.iter().enumerate() {
                let coords = grid.coords_of(idx);
                grid.global_coord(&coords, &mut gc);
                total[global_index(&gc, self.global_nodes)] += b;
            }
        }
        total
            .iter()
            .fold(0.0f64, |m, t| m.max((t - 1.0).abs()))
    }

    /// Human-readable layout for the `validate` subcommand.
    pub fn summary(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "atlas: n={} charts={}^{} lattice={}^{} h={:.6} core_cells={} overlap_cells={}",
            self.n,
            self.charts_per_axis,
            self.n,
            self.global_nodes,
            self.n,
            self.spacing,
            self.core_cells,
            self.overlap_cells
        );
        for (j, chart) in self.charts.iter().enumerate() {
            let lo: Vec<String> = chart.domain_lo.iter().map(|x| format!("{x:.4}")).collect();
            let hi: Vec<String> = chart.domain_hi.iter().map(|x| format!("{x:.4}")).collect();
            let support = self.bumps[j].iter().filter(|&&b| b > 0.0).count();
            let _ = writeln!(
                s,
                "  chart {j}: box [{}]..[{}], dims {:?}, neighbors {:?}, bump support {} nodes",
                lo.join(", "),
                hi.join(", "),
                chart.grid.dims,
                self.neighbor_sets[j],
                support
            );
        }
        s
    }
}

/// Christoffel symbols from metric samples:
/// Gamma^l_{ij} = 1/2 g^{kl} (g_{jk,i} + g_{ik,j} + g_{ij,k}),
/// evaluated with the chart's central/one-sided stencils.
pub fn christoffel_from_metric(grid: &Arc<ChartGrid>, metric: &TensorGrid) -> Result<TensorGrid> {
    let n = grid.ndim();
    let nodes = grid.len();
    assert_eq!(metric.comps, n * n);
    // derivative of each metric component along each axis
    let mut comp_buf = vec![0.0; nodes];
    let mut dmetric = vec![vec![0.0; nodes * n * n]; n]; // [axis][node * n*n + ij]
    for ij in 0..n * n {
        for node in 0..nodes {
            comp_buf[node] = metric.data[node * n * n + ij];
        }
        let f = ChartField {
            grid: grid.clone(),
            component: Component::Scalar,
            values: comp_buf.clone(),
            tau: 0.0,
        };
        for (axis, dm) in dmetric.iter_mut().enumerate() {
            let d = crate::grid::partial(&f, axis);
            for node in 0..nodes {
                dm[node * n * n + ij] = d.values[node];
            }
        }
    }

    let mut out = TensorGrid::zeros(nodes, n * n * n);
    let mut ginv = vec![0.0; n * n];
    for node in 0..nodes {
        if sym_inverse(n, metric.at(node), &mut ginv).is_none() {
            return Err(Error::SingularMetric {
                chart: grid.chart_id,
                node,
            });
        }
        let gamma = out.at_mut(node);
        for l in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let mut sum = 0.0;
                    for k in 0..n {
                        let term = dmetric[i][node * n * n + j * n + k]
                            + dmetric[j][node * n * n + i * n + k]
                            + dmetric[k][node * n * n + i * n + j];
                        sum += ginv[k * n + l] * term;
                    }
                    gamma[l * n * n + i * n + j] = 0.5 * sum;
                }
            }
        }
    }
    Ok(out)
}

/// Coefficient presets for the local diffusion operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoefficientPreset {
    Euclidean,
    /// a_{jk}(x) = (1 + eps sin(2 pi x_1)) delta_{jk}, b = 0.
    Conformal(f64),
}

/// Fill `coeff_a`, `coeff_b` (and their precomputed derivatives) on every
/// chart of the atlas.
pub fn coefficient_preset(preset: CoefficientPreset, atlas: &mut Atlas) -> Result<()> {
    if let CoefficientPreset::Conformal(eps) = preset {
        if eps.abs() >= 0.5 {
            return Err(Error::Config {
                field: "conformal_eps".into(),
                reason: format!("|eps| must stay below 0.5 for ellipticity, got {eps}"),
            });
        }
    }
    let n = atlas.n;
    for chart in atlas.charts.iter_mut() {
        let grid = chart.grid.clone();
        let nodes = grid.len();
        match preset {
            CoefficientPreset::Euclidean => {
                chart.coeff_a = identity_metric(nodes, n);
                chart.coeff_b = TensorGrid::zeros(nodes, n);
                chart.coeff_a_grad = TensorGrid::zeros(nodes, n * n * n);
                chart.coeff_b_grad = TensorGrid::zeros(nodes, n * n);
                chart.flat_coefficients = true;
            }
            CoefficientPreset::Conformal(eps) => {
                let factor = ChartField::from_fn(grid.clone(), Component::Scalar, 0.0, |x| {
                    1.0 + eps * (2.0 * std::f64::consts::PI * x[0]).sin()
                });
                let mut a = TensorGrid::zeros(nodes, n * n);
                for node in 0..nodes {
                    let block = a.at_mut(node);
                    for i in 0..n {
                        block[i * n + i] = factor.values[node];
                    }
                }
                // derivative grids from the same stencils
                let mut agrad = TensorGrid::zeros(nodes, n * n * n);
                for axis in 0..n {
                    let d = crate::grid::partial(&factor, axis);
                    for node in 0..nodes {
                        let block = agrad.at_mut(node);
                        for i in 0..n {
                            block[axis * n * n + i * n + i] = d.values[node];
                        }
                    }
                }
                chart.coeff_a = a;
                chart.coeff_b = TensorGrid::zeros(nodes, n);
                chart.coeff_a_grad = agrad;
                chart.coeff_b_grad = TensorGrid::zeros(nodes, n * n);
                chart.flat_coefficients = eps == 0.0;
            }
        }
        let min_eig = chart.min_ellipticity();
        if min_eig <= 0.0 {
            return Err(Error::Ellipticity {
                chart: chart.chart_id,
                min_eig,
                required: 0.0,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn single_chart_cover() {
        let atlas = build_torus_atlas(2, 1, 0.25, 32).unwrap();
        assert_eq!(atlas.charts.len(), 1);
        assert_eq!(atlas.neighbor_sets[0], vec![0]);
        assert!(atlas.bumps[0].iter().all(|&b| b == 1.0));
        assert!(atlas.charts[0].grid.periodic.iter().all(|&p| p));
    }

    #[test]
    fn four_chart_torus_neighbors() {
        let atlas = build_torus_atlas(2, 2, 0.25, 32).unwrap();
        assert_eq!(atlas.charts.len(), 4);
        // on the 2x2 torus every chart overlaps every chart (wrap-around)
        for j in 0..4 {
            let mut js = atlas.neighbor_sets[j].clone();
            js.sort_unstable();
            assert_eq!(js, vec![0, 1, 2, 3]);
        }
        // symmetry of the neighbor relation
        for j in 0..4 {
            for &k in &atlas.neighbor_sets[j] {
                assert!(atlas.neighbor_sets[k].contains(&j));
            }
        }
    }

    #[test]
    fn partition_of_unity_sums_to_one() {
        for (cpa, res) in [(2usize, 32usize), (3, 16), (2, 49)] {
            let atlas = build_torus_atlas(2, cpa, 0.25, res).unwrap();
            assert!(
                atlas.partition_defect() <= 1e-12,
                "defect {} at cpa={cpa} res={res}",
                atlas.partition_defect()
            );
            for bump in &atlas.bumps {
                assert!(bump.iter().all(|&b| b >= 0.0));
            }
        }
        let atlas3 = build_torus_atlas(3, 2, 0.25, 12).unwrap();
        assert!(atlas3.partition_defect() <= 1e-12);
    }

    #[test]
    fn bump_supported_strictly_inside() {
        let atlas = build_torus_atlas(2, 2, 0.25, 32).unwrap();
        for (j, chart) in atlas.charts.iter().enumerate() {
            for idx in chart.grid.boundary_nodes() {
                assert_eq!(atlas.bumps[j][idx], 0.0);
            }
        }
    }

    #[test]
    fn transition_roundtrip_exact() {
        let atlas = build_torus_atlas(2, 2, 0.3, 25).unwrap();
        for j in 0..atlas.charts.len() {
            for &k in &atlas.neighbor_sets[j] {
                let t_jk = atlas.transition(j, k).unwrap();
                let t_kj = atlas.transition(k, j).unwrap();
                for (a, b) in t_jk.iter().zip(&t_kj) {
                    // translations mod 1 on a shared lattice compose to 0 mod 1
                    let s = (a + b).rem_euclid(1.0);
                    assert!(s.abs() < 1e-15 || (s - 1.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn overlap_too_small_rejected() {
        let err = build_torus_atlas(2, 2, 0.01, 16).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("overlap") || msg.contains("bump"), "{msg}");
    }

    #[test]
    fn christoffel_zero_for_constant_metric() {
        let atlas = build_torus_atlas(2, 1, 0.25, 16).unwrap();
        let grid = atlas.charts[0].grid.clone();
        // identity metric
        let gamma = christoffel_from_metric(&grid, &atlas.charts[0].metric).unwrap();
        assert!(gamma.data.iter().all(|&g| g == 0.0));
        // constant non-identity SPD metric
        let nodes = grid.len();
        let mut m = TensorGrid::zeros(nodes, 4);
        for node in 0..nodes {
            let b = m.at_mut(node);
            b[0] = 2.0;
            b[1] = 0.5;
            b[2] = 0.5;
            b[3] = 1.5;
        }
        let gamma = christoffel_from_metric(&grid, &m).unwrap();
        assert!(gamma.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn christoffel_matches_symbolic_oracle() {
        // g = diag(e^{2 eps sin(2 pi x)}, e^{2 eps sin(2 pi x)}), eps = 0.1;
        // the formula as implemented (all plus signs) evaluated symbolically:
        // with w(x) = e^{2 eps sin(2 pi x1)}, w' = 2 eps 2 pi cos(2 pi x1) w:
        //   Gamma^l_{ij} = 1/2 g^{kl} (g_{jk,i} + g_{ik,j} + g_{ij,k})
        // where only d/dx1 survives.
        let eps = 0.1;
        let atlas = build_torus_atlas(2, 1, 0.25, 64).unwrap();
        let grid = atlas.charts[0].grid.clone();
        let nodes = grid.len();
        let mut m = TensorGrid::zeros(nodes, 4);
        let mut pos = vec![0.0; 2];
        for node in 0..nodes {
            let coords = grid.coords_of(node);
            grid.node_pos(&coords, &mut pos);
            let w = (2.0 * eps * (2.0 * PI * pos[0]).sin()).exp();
            let b = m.at_mut(node);
            b[0] = w;
            b[3] = w;
        }
        let gamma = christoffel_from_metric(&grid, &m).unwrap();
        let mut max_err = 0.0f64;
        for node in 0..nodes {
            let coords = grid.coords_of(node);
            grid.node_pos(&coords, &mut pos);
            let w = (2.0 * eps * (2.0 * PI * pos[0]).sin()).exp();
            let wp = 2.0 * eps * 2.0 * PI * (2.0 * PI * pos[0]).cos() * w;
            let g = gamma.at(node);
            let n = 2;
            // symbolic evaluation of the implemented formula
            for l in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        let mut sum = 0.0;
                        for k in 0..n {
                            let d = |a: usize, b: usize, axis: usize| -> f64 {
                                if a == b && axis == 0 {
                                    wp
                                } else {
                                    0.0
                                }
                            };
                            let term = d(j, k, i) + d(i, k, j) + d(i, j, k);
                            let ginv = if k == l { 1.0 / w } else { 0.0 };
                            sum += ginv * term;
                        }
                        let expect = 0.5 * sum;
                        max_err = max_err.max((g[l * 4 + i * 2 + j] - expect).abs());
                    }
                }
            }
        }
        // central differences against the symbolic derivative: O(h^2)
        assert!(max_err < 5e-3, "max err {max_err}");
    }

    #[test]
    fn christoffel_symmetric_in_lower_indices() {
        let atlas = build_torus_atlas(2, 1, 0.25, 24).unwrap();
        let grid = atlas.charts[0].grid.clone();
        let nodes = grid.len();
        let mut m = TensorGrid::zeros(nodes, 4);
        let mut pos = vec![0.0; 2];
        for node in 0..nodes {
            let coords = grid.coords_of(node);
            grid.node_pos(&coords, &mut pos);
            let b = m.at_mut(node);
            b[0] = 1.0 + 0.2 * (2.0 * PI * pos[0]).sin();
            b[1] = 0.1 * (2.0 * PI * pos[1]).cos();
            b[2] = b[1];
            b[3] = 1.0 + 0.2 * (2.0 * PI * (pos[0] + pos[1])).cos();
        }
        let gamma = christoffel_from_metric(&grid, &m).unwrap();
        for node in 0..nodes {
            let g = gamma.at(node);
            for l in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        assert_eq!(g[l * 4 + i * 2 + j], g[l * 4 + j * 2 + i]);
                    }
                }
            }
        }
    }

    #[test]
    fn conformal_preset_ellipticity() {
        let mut atlas = build_torus_atlas(2, 2, 0.25, 32).unwrap();
        coefficient_preset(CoefficientPreset::Conformal(0.1), &mut atlas).unwrap();
        for chart in &atlas.charts {
            assert!(chart.min_ellipticity() >= 0.9 - 1e-12);
            assert!(!chart.flat_coefficients);
        }
        // eps = 0 degenerates to euclidean
        coefficient_preset(CoefficientPreset::Conformal(0.0), &mut atlas).unwrap();
        for chart in &atlas.charts {
            let n = atlas.n;
            for node in 0..chart.grid.len() {
                let a = chart.coeff_a.at(node);
                for i in 0..n {
                    for j in 0..n {
                        let expect = if i == j { 1.0 } else { 0.0 };
                        assert_eq!(a[i * n + j], expect);
                    }
                }
            }
            assert!(chart.coeff_a_grad.data.iter().all(|&d| d == 0.0));
        }
        // too-large eps rejected
        assert!(coefficient_preset(CoefficientPreset::Conformal(0.6), &mut atlas).is_err());
    }

    #[test]
    fn euclidean_preset_zero_derivatives() {
        let mut atlas = build_torus_atlas(2, 2, 0.25, 32).unwrap();
        coefficient_preset(CoefficientPreset::Euclidean, &mut atlas).unwrap();
        for chart in &atlas.charts {
            assert!(chart.coeff_a_grad.data.iter().all(|&d| d == 0.0));
            assert!(chart.coeff_b_grad.data.iter().all(|&d| d == 0.0));
            assert!(chart.flat_coefficients);
        }
    }

    #[test]
    fn assemble_restrict_consistent_field() {
        use crate::grid::Component;
        let atlas = build_torus_atlas(2, 2, 0.25, 24).unwrap();
        // per-chart restrictions of one global function
        let fields: Vec<ChartField> = atlas
            .charts
            .iter()
            .map(|c| {
                ChartField::from_fn(c.grid.clone(), Component::Scalar, 0.0, |x| {
                    (2.0 * PI * x[0]).sin() + (2.0 * PI * x[1]).cos()
                })
            })
            .collect();
        let refs: Vec<&ChartField> = fields.iter().collect();
        let global = atlas.assemble_global(&refs);
        for (j, f) in fields.iter().enumerate() {
            let r = atlas.restrict_to_chart(&global, j, Component::Scalar, 0.0);
            for (a, b) in r.values.iter().zip(&f.values) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }
}
