//! Discrete calculus on per-chart tensor grids.
//!
//! All charts live on a common global lattice of the unit torus (spacing `h`),
//! so chart-to-chart transfer is exact index shifting. Derivatives are
//! second-order central stencils with periodic wrap on periodic axes and
//! one-sided second-order stencils at non-periodic chart edges.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Geometry-free description of one chart's node lattice.
///
/// `global_offset` places node 0 on the torus lattice (may be negative for
/// charts whose overlap extends across the periodic seam).
#[derive(Debug, Clone, PartialEq)]
pub struct ChartGrid {
    pub chart_id: usize,
    /// Nodes per axis.
    pub dims: Vec<usize>,
    /// Uniform lattice spacing (all axes).
    pub spacing: f64,
    /// Periodic wrap per axis (single-chart torus) or boxed chart.
    pub periodic: Vec<bool>,
    /// Physical coordinate of node 0 per axis (unwrapped).
    pub origin: Vec<f64>,
    /// Lattice index of node 0 per axis on the global torus lattice.
    pub global_offset: Vec<i64>,
    /// Global lattice nodes per axis on the torus.
    pub global_nodes: usize,
}

impl ChartGrid {
    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major strides (last axis contiguous).
    pub fn strides(&self) -> Vec<usize> {
        let n = self.ndim();
        let mut s = vec![1usize; n];
        for a in (0..n.saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.dims[a + 1];
        }
        s
    }

    pub fn coords_of(&self, mut idx: usize) -> Vec<usize> {
        let strides = self.strides();
        let mut c = vec![0usize; self.ndim()];
        for a in 0..self.ndim() {
            c[a] = idx / strides[a];
            idx %= strides[a];
        }
        c
    }

    pub fn index_of(&self, coords: &[usize]) -> usize {
        let strides = self.strides();
        coords.iter().zip(&strides).map(|(c, s)| c * s).sum()
    }

    /// Physical coordinate of a node (unwrapped; periodic identification is
    /// the caller's concern).
    pub fn node_pos(&self, coords: &[usize], out: &mut [f64]) {
        for a in 0..self.ndim() {
            out[a] = self.origin[a] + coords[a] as f64 * self.spacing;
        }
    }

    /// True if the node lies on a non-periodic chart face.
    pub fn is_boundary(&self, coords: &[usize]) -> bool {
        coords.iter().enumerate().any(|(a, &c)| {
            !self.periodic[a] && (c == 0 || c + 1 == self.dims[a])
        })
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.is_boundary(&self.coords_of(i)))
            .collect()
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.is_boundary(&self.coords_of(i)))
            .collect()
    }

    /// Global lattice coordinate (wrapped into [0, global_nodes)) per axis.
    pub fn global_coord(&self, coords: &[usize], out: &mut [i64]) {
        let n = self.global_nodes as i64;
        for a in 0..self.ndim() {
            out[a] = (self.global_offset[a] + coords[a] as i64).rem_euclid(n);
        }
    }
}

/// What a field's samples represent; determines the dump label.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Component {
    /// Velocity component `v^i`, axis index 0-based.
    Velocity(usize),
    /// Control component `r^i`.
    Control(usize),
    Pressure,
    /// Anything auxiliary (Leray source, diagnostics).
    Scalar,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Velocity(i) => write!(f, "v{i}"),
            Component::Control(i) => write!(f, "r{i}"),
            Component::Pressure => write!(f, "p"),
            Component::Scalar => write!(f, "s"),
        }
    }
}

impl Component {
    fn parse(s: &str) -> Option<Component> {
        match s {
            "p" => Some(Component::Pressure),
            "s" => Some(Component::Scalar),
            _ => {
                let (head, tail) = s.split_at(1);
                let idx: usize = tail.parse().ok()?;
                match head {
                    "v" => Some(Component::Velocity(idx)),
                    "r" => Some(Component::Control(idx)),
                    _ => None,
                }
            }
        }
    }
}

/// Grid samples of one scalar component on one chart at rescaled time `tau`.
#[derive(Debug, Clone)]
pub struct ChartField {
    pub grid: Arc<ChartGrid>,
    pub component: Component,
    pub values: Vec<f64>,
    pub tau: f64,
}

impl ChartField {
    pub fn zeros(grid: Arc<ChartGrid>, component: Component, tau: f64) -> Self {
        let len = grid.len();
        ChartField {
            grid,
            component,
            values: vec![0.0; len],
            tau,
        }
    }

    /// Sample a function of physical position.
    pub fn from_fn<F: Fn(&[f64]) -> f64>(
        grid: Arc<ChartGrid>,
        component: Component,
        tau: f64,
        f: F,
    ) -> Self {
        let n = grid.ndim();
        let mut values = vec![0.0; grid.len()];
        let mut pos = vec![0.0; n];
        for (idx, v) in values.iter_mut().enumerate() {
            let coords = grid.coords_of(idx);
            grid.node_pos(&coords, &mut pos);
            *v = f(&pos);
        }
        ChartField {
            grid,
            component,
            values,
            tau,
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &ChartField) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in self.values.iter_mut() {
            *a *= alpha;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Write in the dump format:
    /// `CHARTFIELD v1 chart=<id> comp=<label> dims=<d1>x<d2>[x<d3>] tau=<real>`
    /// followed by newline-separated decimal float64 values, row-major.
    pub fn write_dump<W: Write>(&self, w: &mut W) -> Result<()> {
        let dims = self
            .grid
            .dims
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        writeln!(
            w,
            "CHARTFIELD v1 chart={} comp={} dims={} tau={}",
            self.grid.chart_id, self.component, dims, self.tau
        )?;
        for v in &self.values {
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    /// Parse a dump produced by [`write_dump`]. Reconstructs a bare grid
    /// (no global placement information is stored in the format).
    pub fn read_dump<R: BufRead>(r: &mut R) -> Result<ChartField> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let header = header.trim_end();
        let bad = |reason: &str| Error::Grid(format!("bad CHARTFIELD header: {reason}"));
        let mut parts = header.split_whitespace();
        if parts.next() != Some("CHARTFIELD") || parts.next() != Some("v1") {
            return Err(bad("missing magic"));
        }
        let mut chart = None;
        let mut comp = None;
        let mut dims: Option<Vec<usize>> = None;
        let mut tau = None;
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| bad("expected key=value"))?;
            match k {
                "chart" => chart = v.parse::<usize>().ok(),
                "comp" => comp = Component::parse(v),
                "dims" => {
                    dims = v
                        .split('x')
                        .map(|d| d.parse::<usize>().ok())
                        .collect::<Option<Vec<_>>>()
                }
                "tau" => tau = v.parse::<f64>().ok(),
                _ => return Err(bad(&format!("unknown key {k}"))),
            }
        }
        let (chart, comp, dims, tau) = match (chart, comp, dims, tau) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => return Err(bad("missing field")),
        };
        let n = dims.len();
        let len: usize = dims.iter().product();
        let grid = Arc::new(ChartGrid {
            chart_id: chart,
            dims,
            spacing: 0.0,
            periodic: vec![false; n],
            origin: vec![0.0; n],
            global_offset: vec![0; n],
            global_nodes: 0,
        });
        let mut values = Vec::with_capacity(len);
        let mut line = String::new();
        while values.len() < len {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Grid("truncated CHARTFIELD dump".into()));
            }
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            values.push(
                t.parse::<f64>()
                    .map_err(|e| Error::Grid(format!("bad value line: {e}")))?,
            );
        }
        Ok(ChartField {
            grid,
            component: comp,
            values,
            tau,
        })
    }
}

// ---------------------------------------------------------------------------
// Pointwise stencils

/// Up to 4 (offset, weight) taps along one axis.
type Taps = ([(i64, f64); 4], usize);

#[inline]
fn d1_taps(c: usize, d: usize, periodic: bool, h: f64) -> Taps {
    let i2h = 1.0 / (2.0 * h);
    if periodic || (c > 0 && c + 1 < d) {
        ([(-1, -i2h), (1, i2h), (0, 0.0), (0, 0.0)], 2)
    } else if c == 0 {
        ([(0, -3.0 * i2h), (1, 4.0 * i2h), (2, -i2h), (0, 0.0)], 3)
    } else {
        ([(0, 3.0 * i2h), (-1, -4.0 * i2h), (-2, i2h), (0, 0.0)], 3)
    }
}

#[inline]
fn d2_taps(c: usize, d: usize, periodic: bool, h: f64) -> Taps {
    let ih2 = 1.0 / (h * h);
    if periodic || (c > 0 && c + 1 < d) {
        ([(-1, ih2), (0, -2.0 * ih2), (1, ih2), (0, 0.0)], 3)
    } else if c == 0 {
        (
            [(0, 2.0 * ih2), (1, -5.0 * ih2), (2, 4.0 * ih2), (3, -ih2)],
            4,
        )
    } else {
        (
            [
                (0, 2.0 * ih2),
                (-1, -5.0 * ih2),
                (-2, 4.0 * ih2),
                (-3, -ih2),
            ],
            4,
        )
    }
}

#[inline]
fn shifted_index(
    idx: usize,
    coord: usize,
    offset: i64,
    dim: usize,
    stride: usize,
    periodic: bool,
) -> usize {
    let c = coord as i64 + offset;
    let c = if periodic { c.rem_euclid(dim as i64) } else { c };
    debug_assert!(c >= 0 && (c as usize) < dim);
    (idx as i64 + (c - coord as i64) * stride as i64) as usize
}

/// First derivative along `axis` at one node.
#[inline]
pub(crate) fn d1_at(
    grid: &ChartGrid,
    strides: &[usize],
    values: &[f64],
    idx: usize,
    coords: &[usize],
    axis: usize,
) -> f64 {
    let (taps, k) = d1_taps(
        coords[axis],
        grid.dims[axis],
        grid.periodic[axis],
        grid.spacing,
    );
    let mut acc = 0.0;
    for (off, w) in taps.iter().take(k) {
        let j = shifted_index(
            idx,
            coords[axis],
            *off,
            grid.dims[axis],
            strides[axis],
            grid.periodic[axis],
        );
        acc += w * values[j];
    }
    acc
}

/// Pure second derivative along `axis` at one node.
#[inline]
pub(crate) fn d2_at(
    grid: &ChartGrid,
    strides: &[usize],
    values: &[f64],
    idx: usize,
    coords: &[usize],
    axis: usize,
) -> f64 {
    let (taps, k) = d2_taps(
        coords[axis],
        grid.dims[axis],
        grid.periodic[axis],
        grid.spacing,
    );
    let mut acc = 0.0;
    for (off, w) in taps.iter().take(k) {
        let j = shifted_index(
            idx,
            coords[axis],
            *off,
            grid.dims[axis],
            strides[axis],
            grid.periodic[axis],
        );
        acc += w * values[j];
    }
    acc
}

/// Mixed second derivative d^2/(dx_q dx_k), q != k, at one node.
///
/// Composition of first-derivative stencils in canonical axis order
/// (smaller axis outermost), which makes the operator exactly symmetric
/// in (q, k).
#[inline]
pub(crate) fn d11_at(
    grid: &ChartGrid,
    strides: &[usize],
    values: &[f64],
    idx: usize,
    coords: &[usize],
    q: usize,
    k: usize,
) -> f64 {
    debug_assert_ne!(q, k);
    let (lo, hi) = if q < k { (q, k) } else { (k, q) };
    let (taps, cnt) = d1_taps(
        coords[lo],
        grid.dims[lo],
        grid.periodic[lo],
        grid.spacing,
    );
    let mut acc = 0.0;
    let mut shifted = coords.to_vec();
    for (off, w) in taps.iter().take(cnt) {
        let j = shifted_index(
            idx,
            coords[lo],
            *off,
            grid.dims[lo],
            strides[lo],
            grid.periodic[lo],
        );
        let c = coords[lo] as i64 + off;
        shifted[lo] = if grid.periodic[lo] {
            c.rem_euclid(grid.dims[lo] as i64) as usize
        } else {
            c as usize
        };
        acc += w * d1_at(grid, strides, values, j, &shifted, hi);
    }
    acc
}

// ---------------------------------------------------------------------------
// Array-level operations

fn derived_field<F: FnMut(usize, &[usize]) -> f64>(f: &ChartField, mut node: F) -> ChartField {
    let grid = &f.grid;
    let mut out = vec![0.0; grid.len()];
    let strides = grid.strides();
    let mut coords = vec![0usize; grid.ndim()];
    for (idx, o) in out.iter_mut().enumerate() {
        // decompose idx
        let mut rem = idx;
        for a in 0..grid.ndim() {
            coords[a] = rem / strides[a];
            rem %= strides[a];
        }
        *o = node(idx, &coords);
    }
    ChartField {
        grid: f.grid.clone(),
        component: Component::Scalar,
        values: out,
        tau: f.tau,
    }
}

/// d f / d x_axis, second order.
pub fn partial(f: &ChartField, axis: usize) -> ChartField {
    assert!(axis < f.grid.ndim(), "axis {axis} out of range");
    let grid = f.grid.clone();
    let strides = grid.strides();
    derived_field(f, |idx, coords| {
        d1_at(&grid, &strides, &f.values, idx, coords, axis)
    })
}

/// d^2 f / (d x_q d x_k), second order; exactly symmetric in (q, k).
pub fn hessian(f: &ChartField, q: usize, k: usize) -> ChartField {
    assert!(q < f.grid.ndim() && k < f.grid.ndim(), "axis out of range");
    let grid = f.grid.clone();
    let strides = grid.strides();
    if q == k {
        derived_field(f, |idx, coords| {
            d2_at(&grid, &strides, &f.values, idx, coords, q)
        })
    } else {
        derived_field(f, |idx, coords| {
            d11_at(&grid, &strides, &f.values, idx, coords, q, k)
        })
    }
}

/// Divergence with the metric correction term:
/// sum_i dv^i/dx_i + sum_{k,i} v^k Gamma^i_{ki}.
///
/// `christoffel`, when given, holds n^3 entries per node laid out as
/// `[l][i][j]` for Gamma^l_{ij}; pass `None` on flat charts.
pub fn divergence(v: &[ChartField], christoffel: Option<&[f64]>) -> ChartField {
    let n = v.len();
    assert!(n > 0);
    let grid = v[0].grid.clone();
    for f in v {
        assert_eq!(f.grid.as_ref(), grid.as_ref(), "mismatched grids");
    }
    assert_eq!(n, grid.ndim(), "need one component per axis");
    let strides = grid.strides();
    let mut out = ChartField::zeros(grid.clone(), Component::Scalar, v[0].tau);
    let mut coords = vec![0usize; grid.ndim()];
    for idx in 0..grid.len() {
        let mut rem = idx;
        for a in 0..grid.ndim() {
            coords[a] = rem / strides[a];
            rem %= strides[a];
        }
        let mut acc = 0.0;
        for (i, vi) in v.iter().enumerate() {
            acc += d1_at(&grid, &strides, &vi.values, idx, &coords, i);
        }
        if let Some(gamma) = christoffel {
            let n3 = n * n * n;
            let base = idx * n3;
            for k in 0..n {
                let vk = v[k].values[idx];
                for i in 0..n {
                    // Gamma^i_{ki}
                    acc += vk * gamma[base + i * n * n + k * n + i];
                }
            }
        }
        out.values[idx] = acc;
    }
    out
}

// ---------------------------------------------------------------------------
// Norms

/// Sup-norms of a field history: value, spatial derivatives up to order two,
/// and the finite-difference time derivative across snapshots.
#[derive(Debug, Clone, Default)]
pub struct FieldNorms {
    pub sup_value: f64,
    pub sup_grad: f64,
    pub sup_hess: f64,
    pub sup_dt: f64,
    /// sup_value + sup_grad + sup_hess + sup_dt.
    pub c12: f64,
    /// Multi-index alpha (per-axis derivative orders, |alpha| <= 2) -> sup|D^alpha f|.
    pub per_alpha: BTreeMap<Vec<usize>, f64>,
}

/// All spatial multi-indices with |alpha| <= 2 in n axes.
pub fn multi_indices(n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; n]];
    for a in 0..n {
        let mut m = vec![0; n];
        m[a] = 1;
        out.push(m);
    }
    for a in 0..n {
        let mut m = vec![0; n];
        m[a] = 2;
        out.push(m);
    }
    for a in 0..n {
        for b in (a + 1)..n {
            let mut m = vec![0; n];
            m[a] = 1;
            m[b] = 1;
            out.push(m);
        }
    }
    out
}

fn apply_multi_index(f: &ChartField, alpha: &[usize]) -> ChartField {
    let order: usize = alpha.iter().sum();
    match order {
        0 => f.clone(),
        1 => {
            let axis = alpha.iter().position(|&o| o == 1).unwrap();
            partial(f, axis)
        }
        2 => {
            if let Some(axis) = alpha.iter().position(|&o| o == 2) {
                hessian(f, axis, axis)
            } else {
                let mut it = alpha.iter().enumerate().filter(|(_, &o)| o == 1);
                let q = it.next().unwrap().0;
                let k = it.next().unwrap().0;
                hessian(f, q, k)
            }
        }
        _ => unreachable!("|alpha| <= 2"),
    }
}

/// The |.|_{1,2}-style norms over a time-indexed history (>= 1 snapshot;
/// sup_dt needs >= 2 and is zero otherwise).
pub fn c12_norm(history: &[ChartField]) -> Result<FieldNorms> {
    if history.is_empty() {
        return Err(Error::Grid("c12_norm: empty history".into()));
    }
    let n = history[0].grid.ndim();
    let mut norms = FieldNorms::default();
    for alpha in multi_indices(n) {
        let mut sup = 0.0f64;
        for f in history {
            sup = sup.max(apply_multi_index(f, &alpha).sup_norm());
        }
        norms.per_alpha.insert(alpha, sup);
    }
    for (alpha, sup) in &norms.per_alpha {
        match alpha.iter().sum::<usize>() {
            0 => norms.sup_value = norms.sup_value.max(*sup),
            1 => norms.sup_grad = norms.sup_grad.max(*sup),
            2 => norms.sup_hess = norms.sup_hess.max(*sup),
            _ => {}
        }
    }
    for w in history.windows(2) {
        let dtau = w[1].tau - w[0].tau;
        if dtau.abs() < 1e-300 {
            continue;
        }
        let sup = w[1]
            .values
            .iter()
            .zip(&w[0].values)
            .fold(0.0f64, |m, (a, b)| m.max(((a - b) / dtau).abs()));
        norms.sup_dt = norms.sup_dt.max(sup);
    }
    norms.c12 = norms.sup_value + norms.sup_grad + norms.sup_hess + norms.sup_dt;
    Ok(norms)
}

/// Spatial part only (|f| + |grad f| + |hess f|), used to size rho from data.
pub fn spatial_c2_norm(fields: &[ChartField]) -> f64 {
    let mut total = 0.0f64;
    for f in fields {
        let norms = c12_norm(std::slice::from_ref(f)).expect("non-empty");
        total = total.max(norms.sup_value + norms.sup_grad + norms.sup_hess);
    }
    total
}

// ---------------------------------------------------------------------------
// Overlap transfer

/// Values of a source-chart field copied onto a target chart where the charts
/// overlap, with a coverage mask.
#[derive(Debug, Clone)]
pub struct TransferPatch {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Copy `f` (chart k) onto the grid of chart j by exact global index shift.
///
/// Errors when the charts share no lattice node.
pub fn transfer(f: &ChartField, target: &Arc<ChartGrid>) -> Result<TransferPatch> {
    let src = &f.grid;
    assert_eq!(src.global_nodes, target.global_nodes, "different lattices");
    let n = target.ndim();
    let big_n = target.global_nodes as i64;
    let mut values = vec![0.0; target.len()];
    let mut mask = vec![false; target.len()];
    let t_strides = target.strides();
    let s_strides = src.strides();
    let mut covered = 0usize;
    let mut coords = vec![0usize; n];
    for idx in 0..target.len() {
        let mut rem = idx;
        for a in 0..n {
            coords[a] = rem / t_strides[a];
            rem %= t_strides[a];
        }
        let mut src_idx = 0usize;
        let mut inside = true;
        for a in 0..n {
            let g = (target.global_offset[a] + coords[a] as i64).rem_euclid(big_n);
            // local coordinate in the source chart
            let local = (g - src.global_offset[a]).rem_euclid(big_n);
            if (local as usize) < src.dims[a] {
                src_idx += local as usize * s_strides[a];
            } else {
                inside = false;
                break;
            }
        }
        if inside {
            values[idx] = f.values[src_idx];
            mask[idx] = true;
            covered += 1;
        }
    }
    if covered == 0 {
        return Err(Error::Grid(format!(
            "charts {} and {} do not overlap",
            src.chart_id, target.chart_id
        )));
    }
    Ok(TransferPatch { values, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    pub(crate) fn periodic_grid(n: usize, nodes: usize) -> Arc<ChartGrid> {
        Arc::new(ChartGrid {
            chart_id: 0,
            dims: vec![nodes; n],
            spacing: 1.0 / nodes as f64,
            periodic: vec![true; n],
            origin: vec![0.0; n],
            global_offset: vec![0; n],
            global_nodes: nodes,
        })
    }

    fn boxed_grid(n: usize, nodes: usize) -> Arc<ChartGrid> {
        // lattice strictly larger than the chart so it never self-wraps
        Arc::new(ChartGrid {
            chart_id: 0,
            dims: vec![nodes; n],
            spacing: 1.0 / (nodes - 1) as f64,
            periodic: vec![false; n],
            origin: vec![0.0; n],
            global_offset: vec![0; n],
            global_nodes: 2 * nodes,
        })
    }

    #[test]
    fn partial_of_constant_is_zero() {
        let g = boxed_grid(2, 9);
        let f = ChartField::from_fn(g, Component::Scalar, 0.0, |_| 3.5);
        let d = partial(&f, 0);
        assert_eq!(d.sup_norm(), 0.0);
    }

    #[test]
    fn partial_sine_second_order() {
        let mut errs = Vec::new();
        for nodes in [32usize, 64] {
            let g = periodic_grid(1, nodes);
            let f = ChartField::from_fn(g.clone(), Component::Scalar, 0.0, |x| {
                (2.0 * PI * x[0]).sin()
            });
            let d = partial(&f, 0);
            let exact = ChartField::from_fn(g, Component::Scalar, 0.0, |x| {
                2.0 * PI * (2.0 * PI * x[0]).cos()
            });
            let err = d
                .values
                .iter()
                .zip(&exact.values)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            errs.push(err);
        }
        let ratio = errs[0] / errs[1];
        assert!(
            (3.5..=4.5).contains(&ratio),
            "convergence ratio {ratio}, errs {errs:?}"
        );
    }

    #[test]
    fn hessian_symmetric_bitwise() {
        let g = boxed_grid(2, 12);
        let f = ChartField::from_fn(g, Component::Scalar, 0.0, |x| {
            (2.0 * PI * x[0]).sin() * (3.0 + x[1]).ln()
        });
        let a = hessian(&f, 0, 1);
        let b = hessian(&f, 1, 0);
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn divergence_of_taylor_green_tiny() {
        let g = periodic_grid(2, 32);
        let vx = ChartField::from_fn(g.clone(), Component::Velocity(0), 0.0, |x| {
            (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos()
        });
        let vy = ChartField::from_fn(g, Component::Velocity(1), 0.0, |x| {
            -(2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).sin()
        });
        let div = divergence(&[vx, vy], None);
        // symbolic divergence is identically zero; central stencils cancel exactly
        assert!(div.sup_norm() < 1e-12, "sup div = {}", div.sup_norm());
    }

    #[test]
    fn divergence_of_linear_field() {
        let g = boxed_grid(2, 9);
        let vx = ChartField::from_fn(g.clone(), Component::Velocity(0), 0.0, |x| x[0]);
        let vy = ChartField::from_fn(g, Component::Velocity(1), 0.0, |x| x[1]);
        let div = divergence(&[vx, vy], None);
        // one-sided stencils are exact on linear fields too
        for v in &div.values {
            assert_abs_diff_eq!(*v, 2.0, epsilon = 1e-11);
        }
    }

    #[test]
    fn divergence_constant_flat_zero() {
        let g = boxed_grid(2, 8);
        let vx = ChartField::from_fn(g.clone(), Component::Velocity(0), 0.0, |_| 1.25);
        let vy = ChartField::from_fn(g, Component::Velocity(1), 0.0, |_| -0.5);
        let div = divergence(&[vx, vy], None);
        assert_eq!(div.sup_norm(), 0.0);
    }

    #[test]
    fn c12_of_zero_and_constant() {
        let g = boxed_grid(2, 8);
        let z = ChartField::zeros(g.clone(), Component::Scalar, 0.0);
        let n = c12_norm(&[z]).unwrap();
        assert_eq!(n.c12, 0.0);

        let mut c0 = ChartField::from_fn(g.clone(), Component::Scalar, 0.0, |_| -2.5);
        let mut c1 = c0.clone();
        c0.tau = 0.0;
        c1.tau = 1.0;
        let n = c12_norm(&[c0, c1]).unwrap();
        assert_eq!(n.sup_value, 2.5);
        // one-sided stencil weights leave sub-ulp residue on constants
        assert!(n.sup_grad <= 1e-12);
        assert!(n.sup_hess <= 1e-10);
        assert_eq!(n.sup_dt, 0.0);
    }

    #[test]
    fn c12_time_derivative() {
        let g = periodic_grid(1, 64);
        let snaps: Vec<ChartField> = (0..=4)
            .map(|q| {
                let tau = q as f64 / 4.0;
                let mut f = ChartField::from_fn(g.clone(), Component::Scalar, tau, |x| {
                    (2.0 * PI * x[0]).sin() * tau
                });
                f.tau = tau;
                f
            })
            .collect();
        let n = c12_norm(&snaps).unwrap();
        assert_abs_diff_eq!(n.sup_dt, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(n.sup_value, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn c12_empty_history_errors() {
        assert!(c12_norm(&[]).is_err());
    }

    #[test]
    fn transfer_identity_on_same_chart() {
        let g = boxed_grid(2, 9);
        let f = ChartField::from_fn(g.clone(), Component::Scalar, 0.0, |x| x[0] + 2.0 * x[1]);
        let p = transfer(&f, &g).unwrap();
        assert_eq!(p.values, f.values);
        assert!(p.mask.iter().all(|&m| m));
    }

    #[test]
    fn transfer_across_half_torus_shift() {
        // two box charts on N=16 lattice, offset by 8 (half the torus)
        let mk = |offset: i64| {
            Arc::new(ChartGrid {
                chart_id: offset as usize,
                dims: vec![11],
                spacing: 1.0 / 16.0,
                periodic: vec![false],
                origin: vec![offset as f64 / 16.0],
                global_offset: vec![offset],
                global_nodes: 16,
            })
        };
        let ga = mk(0);
        let gb = mk(8);
        let f = ChartField::from_fn(ga.clone(), Component::Scalar, 0.0, |x| {
            (2.0 * PI * x[0]).sin()
        });
        let p = transfer(&f, &gb).unwrap();
        let mut pos = vec![0.0];
        let mut matched = 0;
        for idx in 0..gb.len() {
            if p.mask[idx] {
                matched += 1;
                gb.node_pos(&[idx], &mut pos);
                // evaluating the unwrapped parameterization sin(2 pi (x + shift))
                // at the target node reproduces the copied sample up to rounding
                let expect = (2.0 * PI * pos[0]).sin();
                assert_abs_diff_eq!(p.values[idx], expect, epsilon = 1e-12);
                // and the copy is an exact lattice sample of the source
                let g = (gb.global_offset[0] + idx as i64).rem_euclid(16) as usize;
                assert_eq!(p.values[idx], f.values[g]);
            }
        }
        assert_eq!(matched, 6, "overlap covers 6 lattice nodes");
    }

    #[test]
    fn transfer_roundtrip_is_identity_on_overlap() {
        let mk = |offset: i64, id: usize| {
            Arc::new(ChartGrid {
                chart_id: id,
                dims: vec![11, 11],
                spacing: 1.0 / 16.0,
                periodic: vec![false, false],
                origin: vec![offset as f64 / 16.0, 0.0],
                global_offset: vec![offset, 0],
                global_nodes: 16,
            })
        };
        let ga = mk(0, 0);
        let gb = mk(8, 1);
        let f = ChartField::from_fn(ga.clone(), Component::Scalar, 0.0, |x| {
            (x[0] * 7.0).sin() + x[1]
        });
        let to_b = transfer(&f, &gb).unwrap();
        let fb = ChartField {
            grid: gb.clone(),
            component: Component::Scalar,
            values: to_b.values.clone(),
            tau: 0.0,
        };
        let back = transfer(&fb, &ga).unwrap();
        let mut checked = 0;
        for idx in 0..ga.len() {
            if back.mask[idx] {
                // nodes covered both ways: k -> j -> k is the identity, exactly
                assert_eq!(back.values[idx], f.values[idx]);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn dump_roundtrip_bit_exact() {
        let g = boxed_grid(2, 5);
        let f = ChartField::from_fn(g, Component::Velocity(1), 0.75, |x| {
            (x[0] * 12345.6789).sin() * 1e-7 + x[1]
        });
        let mut buf = Vec::new();
        f.write_dump(&mut buf).unwrap();
        let mut rd = std::io::BufReader::new(&buf[..]);
        let f2 = ChartField::read_dump(&mut rd).unwrap();
        assert_eq!(f.values, f2.values);
        assert_eq!(f.component, f2.component);
        assert_eq!(f.tau, f2.tau);
        assert_eq!(f.grid.dims, f2.grid.dims);
    }

    #[test]
    fn curl_derived_field_discretely_divergence_free() {
        // v = (d psi / dx1, -d psi / dx0) with the same stencils
        let g = periodic_grid(2, 24);
        let psi = ChartField::from_fn(g.clone(), Component::Scalar, 0.0, |x| {
            (2.0 * PI * x[0]).sin() * (4.0 * PI * x[1]).cos() + (2.0 * PI * (x[0] + x[1])).cos()
        });
        let vx = partial(&psi, 1);
        let mut vy = partial(&psi, 0);
        vy.scale(-1.0);
        let div = divergence(&[vx, vy], None);
        assert!(div.sup_norm() < 1e-12, "sup div = {}", div.sup_norm());
    }

    proptest! {
        #[test]
        fn differential_ops_linear(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = periodic_grid(2, 12);
            let f = ChartField::from_fn(g.clone(), Component::Scalar, 0.0, |x| (x[0]*9.1).sin()+x[1]);
            let h = ChartField::from_fn(g.clone(), Component::Scalar, 0.0, |x| (x[1]*5.0).cos());
            let a: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(-2.0..2.0);
            let mut comb = f.clone();
            comb.scale(a);
            comb.scaled_add(b, &h);
            let lhs = partial(&comb, 0);
            let mut rhs = partial(&f, 0);
            rhs.scale(a);
            rhs.scaled_add(b, &partial(&h, 0));
            for (x, y) in lhs.values.iter().zip(&rhs.values) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }
}
