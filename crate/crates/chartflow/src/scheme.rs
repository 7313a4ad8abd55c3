//! The controlled global scheme.
//!
//! One time step on the rescaled interval [l-1, l]:
//!
//! 1. solve the uncontrolled system with controlled data from step l-1 by a
//!    double fixed point: the outer m-iteration refreshes the inter-chart
//!    coupling (pressure traces blended by the partition of unity), the inner
//!    p-subiteration solves each chart's nonlinear problem by frozen-
//!    coefficient linear parabolic steps;
//! 2. add a control increment `delta r` built from damping sources
//!    (-v_r/C, or -r/C when the switch trips), mollified by the chart heat
//!    kernel and accumulated linearly in tau;
//! 3. reconcile the chart family into one global field through the partition
//!    of unity and record the monitors.
//!
//! Every recorded quantity lands in the monitor table; the CSV schema is
//! fixed here.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rayon::prelude::*;

use crate::elliptic::{PoissonSolver, PressureOperator};
use crate::error::{Error, Result};
use crate::geometry::Atlas;
use crate::grid::{self, ChartField, ChartGrid, Component};
use crate::leray;
use crate::parabolic::{parabolic_step, ParabolicStepProblem};

/// Growth-control strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlVariant {
    None,
    Simple,
    Switched,
}

impl std::fmt::Display for ControlVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControlVariant::None => write!(f, "none"),
            ControlVariant::Simple => write!(f, "simple"),
            ControlVariant::Switched => write!(f, "switched"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig {
    /// tau-step scale: one unit tau step covers rho physical time.
    pub rho: f64,
    /// Control bound C.
    pub big_c: f64,
    /// Viscosity multiplying the second-order coefficients.
    pub nu: f64,
    /// Sup-norm tolerance of the p-subiteration (|delta v|_{1,2}).
    pub tol_p: f64,
    /// Overlap-mismatch tolerance of the m-iteration.
    pub tol_m: f64,
    pub max_p: usize,
    pub max_m: usize,
    /// tau substeps per unit step.
    pub substeps: usize,
    pub steps_l: usize,
    pub control_variant: ControlVariant,
    /// Rescale the control mollifier so a constant source passes unchanged.
    pub normalize_kernel: bool,
    /// rho_l = rho / l instead of a constant step scale.
    pub rho_decay: bool,
    /// Impose Dirichlet velocity boundary data from the neighbor blend
    /// inside the m-loop (optional; the coupling works without it).
    pub velocity_bc: bool,
    /// Enforce rho <= 1/(4 n^2 C) at validation.
    pub strict_contraction: bool,
    /// Abort on initial-data divergence check failure instead of warning.
    pub abort_on_divergence: bool,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            rho: 1.0 / 320.0,
            big_c: 20.0,
            nu: 0.05,
            tol_p: 1e-9,
            tol_m: 1e-8,
            max_p: 50,
            max_m: 60,
            substeps: 16,
            steps_l: 10,
            control_variant: ControlVariant::Switched,
            normalize_kernel: true,
            rho_decay: false,
            velocity_bc: false,
            strict_contraction: false,
            abort_on_divergence: false,
        }
    }
}

impl SchemeConfig {
    /// The contraction step scale 1/(4 n^2 C) for a bound C on |data|_{1,2}.
    pub fn contraction_rho(n: usize, c_bar: f64) -> f64 {
        1.0 / (4.0 * (n * n) as f64 * c_bar.max(1.0))
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let positive = [
            ("rho", self.rho),
            ("nu", self.nu),
            ("tol_p", self.tol_p),
            ("tol_m", self.tol_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config {
                    field: name.into(),
                    reason: format!("must be positive and finite, got {v}"),
                });
            }
        }
        if !(self.big_c > 1.0) {
            return Err(Error::Config {
                field: "big_c".into(),
                reason: format!("control bound C must exceed 1, got {}", self.big_c),
            });
        }
        if self.substeps == 0 || self.max_p == 0 || self.max_m == 0 {
            return Err(Error::Config {
                field: "substeps/max_p/max_m".into(),
                reason: "iteration counts must be at least 1".into(),
            });
        }
        if self.strict_contraction {
            let bound = Self::contraction_rho(n, self.big_c);
            if self.rho > bound + 1e-15 {
                return Err(Error::Config {
                    field: "rho".into(),
                    reason: format!(
                        "strict contraction requires rho <= 1/(4 n^2 C) = {bound}, got {}",
                        self.rho
                    ),
                });
            }
        }
        Ok(())
    }
}

/// One row of the monitor table; -1 in index columns means "not applicable",
/// NaN in value columns likewise.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorRecord {
    pub l: i64,
    pub m: i64,
    pub p: i64,
    pub chart: i64,
    pub comp: i64,
    pub ratio_p: f64,
    pub mismatch_m: f64,
    pub sup_v_r: f64,
    pub sup_r: f64,
    pub sup_v: f64,
    pub c12_v_r: f64,
    pub c12_r: f64,
    pub sup_div: f64,
    pub prop_p: f64,
}

impl MonitorRecord {
    fn blank() -> Self {
        MonitorRecord {
            l: -1,
            m: -1,
            p: -1,
            chart: -1,
            comp: -1,
            ratio_p: f64::NAN,
            mismatch_m: f64::NAN,
            sup_v_r: f64::NAN,
            sup_r: f64::NAN,
            sup_v: f64::NAN,
            c12_v_r: f64::NAN,
            c12_r: f64::NAN,
            sup_div: f64::NAN,
            prop_p: f64::NAN,
        }
    }
}

pub const MONITOR_HEADER: &str =
    "l,m,p,chart,comp,ratio_p,mismatch_m,sup_v_r,sup_r,sup_v,c12_v_r,c12_r,sup_div,prop_P";

pub fn write_monitors_csv<W: Write>(records: &[MonitorRecord], w: &mut W) -> Result<()> {
    writeln!(w, "{MONITOR_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.l,
            r.m,
            r.p,
            r.chart,
            r.comp,
            r.ratio_p,
            r.mismatch_m,
            r.sup_v_r,
            r.sup_r,
            r.sup_v,
            r.c12_v_r,
            r.c12_r,
            r.sup_div,
            r.prop_p
        )?;
    }
    Ok(())
}

pub fn read_monitors_csv<R: BufRead>(r: &mut R) -> Result<Vec<MonitorRecord>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Grid("empty monitors file".into()))?;
    if header.trim() != MONITOR_HEADER {
        return Err(Error::Grid(format!("bad monitors header: {header}")));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 14 {
            return Err(Error::Grid(format!(
                "monitors line {}: expected 14 columns, got {}",
                lineno + 2,
                cols.len()
            )));
        }
        let int = |s: &str| -> Result<i64> {
            s.parse()
                .map_err(|e| Error::Grid(format!("monitors line {}: {e}", lineno + 2)))
        };
        let real = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Grid(format!("monitors line {}: {e}", lineno + 2)))
        };
        out.push(MonitorRecord {
            l: int(cols[0])?,
            m: int(cols[1])?,
            p: int(cols[2])?,
            chart: int(cols[3])?,
            comp: int(cols[4])?,
            ratio_p: real(cols[5])?,
            mismatch_m: real(cols[6])?,
            sup_v_r: real(cols[7])?,
            sup_r: real(cols[8])?,
            sup_v: real(cols[9])?,
            c12_v_r: real(cols[10])?,
            c12_r: real(cols[11])?,
            sup_div: real(cols[12])?,
            prop_p: real(cols[13])?,
        });
    }
    Ok(out)
}

/// The full per-chart family at an integer step, plus monitors.
///
/// `v` is primary; `v_r = v + r` holds bitwise because it is constructed by
/// that very addition after every transition.
#[derive(Debug, Clone)]
pub struct GlobalState {
    pub step_l: usize,
    /// v[chart][comp], controlled minus control, at tau = step_l.
    pub v: Vec<Vec<ChartField>>,
    /// Control function r[chart][comp].
    pub r: Vec<Vec<ChartField>>,
    /// Controlled velocity v_r[chart][comp] = v + r (bitwise).
    pub v_r: Vec<Vec<ChartField>>,
    /// Converged pressures per chart per tau level from the last step
    /// (warm start for the next coupling iteration).
    pub pressures: Vec<Vec<ChartField>>,
    pub monitors: Vec<MonitorRecord>,
}

/// Output of one uncontrolled sweep over [l-1, l].
pub struct StepSolution {
    /// trajectories[chart][comp][level]
    pub trajectories: Vec<Vec<Vec<ChartField>>>,
    /// pressures[chart][level]
    pub pressures: Vec<Vec<ChartField>>,
    pub events: Vec<MonitorRecord>,
    pub m_used: usize,
    pub final_mismatch: f64,
}

struct ChartOutcome {
    traj: Vec<Vec<ChartField>>,
    pressures: Vec<ChartField>,
    ratios: Vec<f64>,
}

/// Increment of the control function over one step: `delta r(tau) =
/// (tau - (l-1)) * sources`, with the mollified damping sources at tau = l.
pub struct ControlIncrement {
    /// sources[chart][comp]: the mollified phi fields; delta r(l) equals them.
    pub sources: Vec<Vec<ChartField>>,
    /// Some(flag) for the switched variant: whether property P held.
    pub prop_p: Option<bool>,
}

/// Scheme driver: immutable atlas, cached per-chart solvers, configuration.
pub struct Scheme<'a> {
    pub atlas: &'a Atlas,
    pub config: SchemeConfig,
    solvers: Vec<PoissonSolver>,
    global_grid: Arc<ChartGrid>,
}

impl<'a> Scheme<'a> {
    pub fn new(atlas: &'a Atlas, config: SchemeConfig) -> Result<Self> {
        config.validate(atlas.n)?;
        let solvers = atlas
            .charts
            .iter()
            .map(|c| {
                let op = if c.flat_coefficients {
                    PressureOperator::Laplace
                } else {
                    PressureOperator::DivAGrad
                };
                PoissonSolver::new(c, op)
            })
            .collect();
        let global_grid = Arc::new(ChartGrid {
            chart_id: usize::MAX,
            dims: vec![atlas.global_nodes; atlas.n],
            spacing: atlas.spacing,
            periodic: vec![true; atlas.n],
            origin: vec![0.0; atlas.n],
            global_offset: vec![0; atlas.n],
            global_nodes: atlas.global_nodes,
        });
        Ok(Scheme {
            atlas,
            config,
            solvers,
            global_grid,
        })
    }

    pub fn solver(&self, j: usize) -> &PoissonSolver {
        &self.solvers[j]
    }

    fn n_charts(&self) -> usize {
        self.atlas.charts.len()
    }

    fn rho_at(&self, l: usize) -> f64 {
        if self.config.rho_decay {
            self.config.rho / l.max(1) as f64
        } else {
            self.config.rho
        }
    }

    /// Initial state from per-chart initial velocity samples h[chart][comp].
    ///
    /// Control variant `none` starts from r = 0; the others from r = h/C with
    /// v_r = (1 + 1/C) h.
    pub fn init(&self, h: Vec<Vec<ChartField>>) -> Result<GlobalState> {
        let n = self.atlas.n;
        assert_eq!(h.len(), self.n_charts());
        // divergence consistency of the data
        let h2 = self.atlas.spacing * self.atlas.spacing;
        for (j, fields) in h.iter().enumerate() {
            assert_eq!(fields.len(), n);
            let div = grid::divergence(fields, None);
            let scale = 1.0 + grid::spatial_c2_norm(fields);
            let bound = 10.0 * h2 * scale;
            if div.sup_norm() > bound {
                let msg = format!(
                    "initial data on chart {j}: sup|div h| = {} exceeds {bound}",
                    div.sup_norm()
                );
                if self.config.abort_on_divergence {
                    return Err(Error::Config {
                        field: "initial condition".into(),
                        reason: msg,
                    });
                }
                eprintln!("warning: {msg}");
            }
        }

        let c = self.config.big_c;
        let mut v = Vec::with_capacity(self.n_charts());
        let mut r = Vec::with_capacity(self.n_charts());
        let mut v_r = Vec::with_capacity(self.n_charts());
        for fields in &h {
            let mut vj = Vec::with_capacity(n);
            let mut rj = Vec::with_capacity(n);
            let mut vrj = Vec::with_capacity(n);
            for (i, f) in fields.iter().enumerate() {
                let mut vf = f.clone();
                vf.component = Component::Velocity(i);
                vf.tau = 0.0;
                let mut rf = f.clone();
                rf.component = Component::Control(i);
                rf.tau = 0.0;
                match self.config.control_variant {
                    ControlVariant::None => rf.values.iter_mut().for_each(|x| *x = 0.0),
                    _ => rf.scale(1.0 / c),
                }
                let mut vrf = vf.clone();
                vrf.scaled_add(1.0, &rf);
                vj.push(vf);
                rj.push(rf);
                vrj.push(vrf);
            }
            v.push(vj);
            r.push(rj);
            v_r.push(vrj);
        }

        // m = 0 pressure iterate: interior-only solve from the data
        let mut pressures = Vec::with_capacity(self.n_charts());
        for j in 0..self.n_charts() {
            let s = leray::s_functional(&v_r[j], &self.atlas.charts[j], self.config.nu);
            let g = vec![0.0; self.solvers[j].boundary_nodes().len()];
            let f: Vec<f64> = s.values.iter().map(|x| -x).collect();
            let p = self.solvers[j].solve(&f, &g, None)?;
            let p = ChartField {
                grid: self.atlas.charts[j].grid.clone(),
                component: Component::Pressure,
                values: p,
                tau: 0.0,
            };
            pressures.push(vec![p; self.config.substeps + 1]);
        }

        let mut state = GlobalState {
            step_l: 0,
            v,
            r,
            v_r,
            pressures,
            monitors: Vec::new(),
        };
        self.record_step_event(&mut state, None, None)?;
        Ok(state)
    }

    /// The inner fixed point for one chart: linear parabolic solves with the
    /// convection factor and interior Leray source frozen at iterate p-1 and
    /// the coupling traces frozen for the whole loop.
    #[allow(clippy::too_many_arguments)]
    fn subiterate_chart(
        &self,
        j: usize,
        l: usize,
        m: usize,
        rho_l: f64,
        data: &[ChartField],
        prev_traj: &[Vec<ChartField>],
        traces: Option<&[Vec<f64>]>,
        velocity_bc: Option<&[Vec<Vec<f64>>]>,
        warm_pressures: &[ChartField],
    ) -> Result<ChartOutcome> {
        let cfg = &self.config;
        let chart = &self.atlas.charts[j];
        let grid_j = &chart.grid;
        let n = grid_j.ndim();
        let m_tau = cfg.substeps;
        let levels = m_tau + 1;
        let empty_g: Vec<f64> = Vec::new();

        let mut cur: Vec<Vec<ChartField>> = prev_traj.to_vec();
        let mut pressures: Vec<ChartField> = warm_pressures.to_vec();
        let mut ratios = Vec::new();
        let mut prev_norm: Option<f64> = None;
        let mut bad_ratios = 0usize;

        for p_iter in 1..=cfg.max_p {
            // Leray force per level from the p-1 trajectory
            let mut force: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(levels); n];
            for q in 0..levels {
                let comps: Vec<ChartField> = (0..n).map(|i| cur[i][q].clone()).collect();
                let s = leray::s_functional(&comps, chart, cfg.nu);
                let g = match traces {
                    Some(t) => &t[q],
                    None => &empty_g,
                };
                let f: Vec<f64> = s.values.iter().map(|x| -x).collect();
                let pq = self.solvers[j]
                    .solve(&f, g, Some(&pressures[q].values))
                    .map_err(|e| match e {
                        Error::SolverFailure { chart, reason } => Error::SolverFailure {
                            chart,
                            reason: format!("(l={l}, m={m}, p={p_iter}) {reason}"),
                        },
                        other => other,
                    })?;
                pressures[q].values = pq;
                pressures[q].tau = data[0].tau + q as f64 / m_tau as f64;
                let grads = crate::elliptic::leray_gradient(&pressures[q]);
                for (i, gfield) in grads.into_iter().enumerate() {
                    let mut vals = gfield.values;
                    vals.iter_mut().for_each(|x| *x = -*x);
                    force[i].push(vals);
                }
            }

            // frozen convection per level
            let conv: Vec<Vec<Vec<f64>>> = (0..levels)
                .map(|q| (0..n).map(|k| cur[k][q].values.clone()).collect())
                .collect();

            let mut next: Vec<Vec<ChartField>> = Vec::with_capacity(n);
            for i in 0..n {
                let bc = velocity_bc.map(|b| &b[i]);
                let problem = ParabolicStepProblem {
                    geometry: chart,
                    nu: cfg.nu,
                    rho: rho_l,
                    substeps: m_tau,
                    tau_start: data[i].tau,
                    initial: &data[i],
                    source: Some(&force[i]),
                    convection: Some(&conv),
                    boundary: bc.map(|b| b.as_slice()),
                    rel_tol: 1e-12,
                    max_iter: 10_000,
                };
                let traj = parabolic_step(&problem).map_err(|e| match e {
                    Error::NonFinite { chart, comp, .. } => Error::NonFinite {
                        l,
                        m,
                        p: p_iter as i64,
                        chart,
                        comp,
                    },
                    other => other,
                })?;
                next.push(traj);
            }

            // |delta v^p|_{1,2} over the trajectory, max over components
            let mut norm_p = 0.0f64;
            for i in 0..n {
                let diffs: Vec<ChartField> = (0..levels)
                    .map(|q| {
                        let mut d = next[i][q].clone();
                        d.scaled_add(-1.0, &cur[i][q]);
                        d
                    })
                    .collect();
                let norms = grid::c12_norm(&diffs)?;
                norm_p = norm_p.max(norms.c12);
            }
            if let Some(prev) = prev_norm {
                if prev > 0.0 {
                    let ratio = norm_p / prev;
                    ratios.push(ratio);
                    if ratio >= 1.0 {
                        bad_ratios += 1;
                        if bad_ratios >= 3 {
                            return Err(Error::NonContraction {
                                l,
                                m,
                                chart: j,
                                ratios: ratios.iter().rev().take(3).rev().copied().collect(),
                            });
                        }
                    } else {
                        bad_ratios = 0;
                    }
                }
            }
            cur = next;
            if norm_p <= cfg.tol_p {
                return Ok(ChartOutcome {
                    traj: cur,
                    pressures,
                    ratios,
                });
            }
            prev_norm = Some(norm_p);
        }
        Err(Error::SolverFailure {
            chart: j,
            reason: format!(
                "(l={l}, m={m}) p-subiteration missed tol_p={} within max_p={}",
                cfg.tol_p, cfg.max_p
            ),
        })
    }

    /// Max over proper overlap pairs, components and tau levels of the
    /// field disagreement on shared open-interior nodes.
    fn overlap_mismatch(&self, trajs: &[Vec<Vec<ChartField>>]) -> f64 {
        let atlas = self.atlas;
        let n = atlas.n;
        let mut worst = 0.0f64;
        let mut gc = vec![0i64; n];
        for j in 0..self.n_charts() {
            let grid_j = &atlas.charts[j].grid;
            for &k in &atlas.proper_neighbors(j) {
                if k <= j {
                    continue;
                }
                let grid_k = &atlas.charts[k].grid;
                for idx in 0..grid_j.len() {
                    let coords = grid_j.coords_of(idx);
                    if grid_j.is_boundary(&coords) {
                        continue;
                    }
                    grid_j.global_coord(&coords, &mut gc);
                    let Some(idx_k) = atlas.local_index(k, &gc) else {
                        continue;
                    };
                    let coords_k = grid_k.coords_of(idx_k);
                    if grid_k.is_boundary(&coords_k) {
                        continue;
                    }
                    for i in 0..n {
                        for q in 0..trajs[j][i].len() {
                            let d =
                                (trajs[j][i][q].values[idx] - trajs[k][i][q].values[idx_k]).abs();
                            worst = worst.max(d);
                        }
                    }
                }
            }
        }
        worst
    }

    /// Outer coupling iteration over [l-1, l]: refresh the pressure traces
    /// (and optional velocity boundary data) from iterate m-1, sweep all
    /// charts in parallel, measure the overlap mismatch, stop at tol_m.
    pub fn iterate_m(
        &self,
        l: usize,
        data: &[Vec<ChartField>],
        init_pressures: &[Vec<ChartField>],
    ) -> Result<StepSolution> {
        let cfg = &self.config;
        let n = self.atlas.n;
        let nc = self.n_charts();
        let rho_l = self.rho_at(l);
        let m_tau = cfg.substeps;
        let levels = m_tau + 1;

        // m = 0 iterate: constant-in-tau extension of the data
        let mut prev: Vec<Vec<Vec<ChartField>>> = (0..nc)
            .map(|j| {
                (0..n)
                    .map(|i| {
                        (0..levels)
                            .map(|q| {
                                let mut f = data[j][i].clone();
                                f.tau = data[j][i].tau + q as f64 / m_tau as f64;
                                f
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mut prev_press: Vec<Vec<ChartField>> = init_pressures.to_vec();

        let mut events = Vec::new();
        let mut best = f64::INFINITY;
        let mut best_delta = f64::INFINITY;
        let mut stall = 0usize;
        let mut final_mismatch = 0.0;
        let mut m_used = 0;

        for m in 1..=cfg.max_m {
            // coupling data frozen at m-1
            let traces: Vec<Option<Vec<Vec<f64>>>> = (0..nc)
                .map(|j| -> Result<Option<Vec<Vec<f64>>>> {
                    if self.solvers[j].boundary_nodes().is_empty() {
                        return Ok(None);
                    }
                    let mut per_level = Vec::with_capacity(levels);
                    for q in 0..levels {
                        let refs: Vec<&ChartField> =
                            (0..nc).map(|k| &prev_press[k][q]).collect();
                        per_level.push(leray::boundary_pressure_data(self.atlas, j, &refs)?);
                    }
                    Ok(Some(per_level))
                })
                .collect::<Result<_>>()?;
            let vel_bc: Vec<Option<Vec<Vec<Vec<f64>>>>> = if cfg.velocity_bc {
                (0..nc)
                    .map(|j| self.velocity_boundary_blend(j, &prev))
                    .collect()
            } else {
                vec![None; nc]
            };

            let outcomes: Vec<Result<ChartOutcome>> = (0..nc)
                .into_par_iter()
                .map(|j| {
                    self.subiterate_chart(
                        j,
                        l,
                        m,
                        rho_l,
                        &data[j],
                        &prev[j],
                        traces[j].as_deref(),
                        vel_bc[j].as_deref(),
                        &prev_press[j],
                    )
                })
                .collect();
            let mut new_traj = Vec::with_capacity(nc);
            let mut new_press = Vec::with_capacity(nc);
            for (j, res) in outcomes.into_iter().enumerate() {
                let out = res?;
                for (pi, &ratio) in out.ratios.iter().enumerate() {
                    let mut rec = MonitorRecord::blank();
                    rec.l = l as i64;
                    rec.m = m as i64;
                    rec.p = (pi + 2) as i64;
                    rec.chart = j as i64;
                    rec.ratio_p = ratio;
                    events.push(rec);
                }
                new_traj.push(out.traj);
                new_press.push(out.pressures);
            }

            let mismatch = self.overlap_mismatch(&new_traj);
            // the coupling iteration's own increment: once it vanishes the
            // fixed point is reached and the remaining overlap mismatch is
            // discretization error, not iteration error
            let mut iter_delta = 0.0f64;
            for j in 0..nc {
                for i in 0..n {
                    for q in 0..levels {
                        for (a, b) in new_traj[j][i][q]
                            .values
                            .iter()
                            .zip(&prev[j][i][q].values)
                        {
                            iter_delta = iter_delta.max((a - b).abs());
                        }
                    }
                }
            }
            let mut rec = MonitorRecord::blank();
            rec.l = l as i64;
            rec.m = m as i64;
            rec.mismatch_m = mismatch;
            events.push(rec);

            prev = new_traj;
            prev_press = new_press;
            final_mismatch = mismatch;
            m_used = m;

            if nc == 1 || mismatch <= cfg.tol_m || (m >= 2 && iter_delta <= cfg.tol_m) {
                break;
            }
            if mismatch < best - 1e-16 || iter_delta < best_delta - 1e-16 {
                best = best.min(mismatch);
                best_delta = best_delta.min(iter_delta);
                stall = 0;
            } else {
                stall += 1;
                if stall >= 5 {
                    return Err(Error::MismatchStagnation {
                        l,
                        m,
                        mismatch,
                        tol: cfg.tol_m,
                    });
                }
            }
            if m == cfg.max_m {
                return Err(Error::MismatchStagnation {
                    l,
                    m,
                    mismatch,
                    tol: cfg.tol_m,
                });
            }
        }

        Ok(StepSolution {
            trajectories: prev,
            pressures: prev_press,
            events,
            m_used,
            final_mismatch,
        })
    }

    /// Dirichlet velocity data for chart j from the m-1 neighbor fields:
    /// partition-blended values per component per level per boundary node.
    fn velocity_boundary_blend(
        &self,
        j: usize,
        prev: &[Vec<Vec<ChartField>>],
    ) -> Option<Vec<Vec<Vec<f64>>>> {
        let atlas = self.atlas;
        let grid_j = &atlas.charts[j].grid;
        let boundary = grid_j.boundary_nodes();
        if boundary.is_empty() {
            return None;
        }
        let n = atlas.n;
        let levels = prev[j][0].len();
        let mut gc = vec![0i64; n];
        let mut out = vec![vec![vec![0.0; boundary.len()]; levels]; n];
        for (slot, &node) in boundary.iter().enumerate() {
            let coords = grid_j.coords_of(node);
            grid_j.global_coord(&coords, &mut gc);
            let cover = atlas.interior_cover(j, &gc);
            let wsum: f64 = cover.iter().map(|&(k, local)| atlas.bumps[k][local]).sum();
            for &(k, local) in &cover {
                let w = atlas.bumps[k][local] / wsum.max(1e-300);
                for i in 0..n {
                    for q in 0..levels {
                        out[i][q][slot] += w * prev[k][i][q].values[local];
                    }
                }
            }
        }
        Some(out)
    }

    /// Mollify per-chart fields by the source-free chart evolution over one
    /// unit tau step; with `normalize_kernel` the response to the constant
    /// field one is divided out.
    fn mollify(&self, l: usize, fields: &[Vec<ChartField>]) -> Result<Vec<Vec<ChartField>>> {
        let cfg = &self.config;
        let rho_l = self.rho_at(l);
        let mut out = Vec::with_capacity(fields.len());
        for (j, comps) in fields.iter().enumerate() {
            let chart = &self.atlas.charts[j];
            let norm = if cfg.normalize_kernel {
                let ones = ChartField::from_fn(chart.grid.clone(), Component::Scalar, 0.0, |_| 1.0);
                let problem =
                    ParabolicStepProblem::homogeneous(chart, cfg.nu, rho_l, cfg.substeps, &ones);
                let levels = parabolic_step(&problem)?;
                Some(levels.into_iter().last().expect("levels"))
            } else {
                None
            };
            let mut comps_out = Vec::with_capacity(comps.len());
            for f in comps {
                let problem =
                    ParabolicStepProblem::homogeneous(chart, cfg.nu, rho_l, cfg.substeps, f);
                let levels = parabolic_step(&problem)?;
                let mut k = levels.into_iter().last().expect("levels");
                if let Some(nrm) = &norm {
                    for (kv, nv) in k.values.iter_mut().zip(&nrm.values) {
                        if nv.abs() > 1e-12 {
                            *kv /= nv;
                        }
                    }
                }
                comps_out.push(k);
            }
            out.push(comps_out);
        }
        Ok(out)
    }

    /// Simple damping increment: sources phi = -v_r(l-1)/C, mollified;
    /// delta r(tau) = (tau - (l-1)) * sources.
    pub fn control_increment_simple(&self, state: &GlobalState) -> Result<ControlIncrement> {
        let c = self.config.big_c;
        let phi: Vec<Vec<ChartField>> = state
            .v_r
            .iter()
            .map(|comps| {
                comps
                    .iter()
                    .map(|f| {
                        let mut p = f.clone();
                        p.scale(-1.0 / c);
                        p
                    })
                    .collect()
            })
            .collect();
        let sources = self.mollify(state.step_l + 1, &phi)?;
        Ok(ControlIncrement {
            sources,
            prop_p: None,
        })
    }

    /// Switched increment: property P checks sup|D^alpha r(l-1)| <= C for
    /// all |alpha| <= 2; when P fails the source switches to -r(l-1)/C.
    pub fn control_increment_switched(&self, state: &GlobalState) -> Result<ControlIncrement> {
        let c = self.config.big_c;
        let mut prop_p = true;
        for comps in &state.r {
            for f in comps {
                let norms = grid::c12_norm(std::slice::from_ref(f))?;
                for sup in norms.per_alpha.values() {
                    if *sup > c {
                        prop_p = false;
                    }
                }
            }
        }
        let base = if prop_p { &state.v_r } else { &state.r };
        let phi: Vec<Vec<ChartField>> = base
            .iter()
            .map(|comps| {
                comps
                    .iter()
                    .map(|f| {
                        let mut p = f.clone();
                        p.scale(-1.0 / c);
                        p
                    })
                    .collect()
            })
            .collect();
        let sources = self.mollify(state.step_l + 1, &phi)?;
        Ok(ControlIncrement {
            sources,
            prop_p: Some(prop_p),
        })
    }

    /// Advance one unit tau step: uncontrolled solve with controlled data,
    /// control increment, reconciliation, monitors.
    pub fn time_step(&self, state: &mut GlobalState) -> Result<()> {
        let l = state.step_l + 1;
        let n = self.atlas.n;
        let nc = self.n_charts();

        // 1) uncontrolled system with controlled data
        let solution = self.iterate_m(l, &state.v_r, &state.pressures)?;

        // 2) control increment
        let increment = match self.config.control_variant {
            ControlVariant::None => None,
            ControlVariant::Simple => Some(self.control_increment_simple(state)?),
            ControlVariant::Switched => Some(self.control_increment_switched(state)?),
        };
        let prop_p = increment.as_ref().and_then(|i| i.prop_p);

        // 3) new integer-time fields: v = u - r_old is the uncontrolled part
        //    net of the previous control; r accumulates the increment
        let old_v_r = state.v_r.clone();
        let old_r = state.r.clone();
        let mut new_v = Vec::with_capacity(nc);
        let mut new_r = Vec::with_capacity(nc);
        for j in 0..nc {
            let mut vj = Vec::with_capacity(n);
            let mut rj = Vec::with_capacity(n);
            for i in 0..n {
                let u = solution.trajectories[j][i].last().expect("levels");
                let mut v_new = u.clone();
                v_new.component = Component::Velocity(i);
                v_new.scaled_add(-1.0, &old_r[j][i]);
                let mut r_new = old_r[j][i].clone();
                if let Some(inc) = &increment {
                    r_new.scaled_add(1.0, &inc.sources[j][i]);
                }
                r_new.tau = l as f64;
                v_new.tau = l as f64;
                vj.push(v_new);
                rj.push(r_new);
            }
            new_v.push(vj);
            new_r.push(rj);
        }

        // 4) reconcile the chart family into restrictions of one global field
        for i in 0..n {
            let refs_v: Vec<&ChartField> = (0..nc).map(|j| &new_v[j][i]).collect();
            let gv = self.atlas.assemble_global(&refs_v);
            let refs_r: Vec<&ChartField> = (0..nc).map(|j| &new_r[j][i]).collect();
            let gr = self.atlas.assemble_global(&refs_r);
            for j in 0..nc {
                new_v[j][i] =
                    self.atlas
                        .restrict_to_chart(&gv, j, Component::Velocity(i), l as f64);
                new_r[j][i] =
                    self.atlas
                        .restrict_to_chart(&gr, j, Component::Control(i), l as f64);
            }
        }
        let mut new_v_r = Vec::with_capacity(nc);
        for j in 0..nc {
            let mut vrj = Vec::with_capacity(n);
            for i in 0..n {
                let mut vr = new_v[j][i].clone();
                vr.scaled_add(1.0, &new_r[j][i]);
                vrj.push(vr);
            }
            new_v_r.push(vrj);
        }

        // finite check with coordinates
        for j in 0..nc {
            for i in 0..n {
                for (name, f) in [
                    ("v", &new_v[j][i]),
                    ("r", &new_r[j][i]),
                    ("v_r", &new_v_r[j][i]),
                ] {
                    if !f.all_finite() {
                        return Err(Error::NonFinite {
                            l,
                            m: solution.m_used,
                            p: -1,
                            chart: j,
                            comp: format!("{name}{i}"),
                        });
                    }
                }
            }
        }

        state.step_l = l;
        state.v = new_v;
        state.r = new_r;
        state.v_r = new_v_r;
        state.pressures = solution.pressures;
        state.monitors.extend(solution.events);
        self.record_step_event(state, Some(&old_v_r), Some(prop_p))?;
        let _ = old_v_r;
        Ok(())
    }

    /// Aggregated per-step monitor row (chart = comp = -1).
    fn record_step_event(
        &self,
        state: &mut GlobalState,
        previous_v_r: Option<&Vec<Vec<ChartField>>>,
        prop_p: Option<Option<bool>>,
    ) -> Result<()> {
        let n = self.atlas.n;
        let nc = self.n_charts();
        let mut rec = MonitorRecord::blank();
        rec.l = state.step_l as i64;
        let mut sup_v_r = 0.0f64;
        let mut sup_r = 0.0f64;
        let mut sup_v = 0.0f64;
        let mut c12_v_r = 0.0f64;
        let mut c12_r = 0.0f64;
        for j in 0..nc {
            for i in 0..n {
                sup_v_r = sup_v_r.max(state.v_r[j][i].sup_norm());
                sup_r = sup_r.max(state.r[j][i].sup_norm());
                sup_v = sup_v.max(state.v[j][i].sup_norm());
                let hist_vr: Vec<ChartField> = match previous_v_r {
                    Some(prev) => vec![prev[j][i].clone(), state.v_r[j][i].clone()],
                    None => vec![state.v_r[j][i].clone()],
                };
                c12_v_r = c12_v_r.max(grid::c12_norm(&hist_vr)?.c12);
                c12_r = c12_r.max(grid::c12_norm(std::slice::from_ref(&state.r[j][i]))?.c12);
            }
        }
        // global divergence of the reconstructed velocity
        let mut global_v = Vec::with_capacity(n);
        for i in 0..n {
            let refs: Vec<&ChartField> = (0..nc).map(|j| &state.v[j][i]).collect();
            let gv = self.atlas.assemble_global(&refs);
            global_v.push(ChartField {
                grid: self.global_grid.clone(),
                component: Component::Velocity(i),
                values: gv,
                tau: state.step_l as f64,
            });
        }
        let div = grid::divergence(&global_v, None);
        rec.sup_v_r = sup_v_r;
        rec.sup_r = sup_r;
        rec.sup_v = sup_v;
        rec.c12_v_r = c12_v_r;
        rec.c12_r = c12_r;
        rec.sup_div = div.sup_norm();
        rec.prop_p = match prop_p {
            Some(Some(true)) => 1.0,
            Some(Some(false)) => 0.0,
            _ => f64::NAN,
        };
        state.monitors.push(rec);
        Ok(())
    }

    /// Run `steps_l` time steps, invoking the observer after each.
    pub fn run<F>(&self, state: &mut GlobalState, mut observer: F) -> Result<()>
    where
        F: FnMut(&GlobalState) -> Result<()>,
    {
        for _ in 0..self.config.steps_l {
            self.time_step(state)?;
            observer(state)?;
        }
        Ok(())
    }
}

/// Sum over |alpha| <= 2 of sup|D^alpha f|, maximized over a field family;
/// the quantity the growth bounds are stated in.
pub fn alpha_sum_norm(fields: &[ChartField]) -> f64 {
    let mut worst = 0.0f64;
    for f in fields {
        let norms = grid::c12_norm(std::slice::from_ref(f)).expect("non-empty");
        let total: f64 = norms.per_alpha.values().sum();
        worst = worst.max(total);
    }
    worst
}
