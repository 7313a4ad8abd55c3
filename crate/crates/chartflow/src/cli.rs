//! Run orchestration and diagnostics serialization behind the `run`,
//! `validate`, and `convergence` subcommands.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};

use crate::config::{global_grid, initial_condition, InitialCondition, RunConfig};
use crate::elliptic::{assemble_green_matrix, solve_dirichlet, DirichletProblem, PressureOperator};
use crate::error::{Error, Result};
use crate::geometry::{ChartGeometry, TensorGrid};
use crate::grid::{self, ChartField, ChartGrid, Component};
use crate::parabolic::GaussianKernel;
use crate::scheme::{write_monitors_csv, GlobalState, Scheme};

pub struct RunSummary {
    pub steps: usize,
    pub max_sup_v_r: f64,
    pub max_sup_r: f64,
}

fn dump_state(state: &GlobalState, out_dir: &Path) -> Result<()> {
    for (j, comps) in state.v.iter().enumerate() {
        for group in [&state.v[j], &state.r[j], &state.v_r[j]] {
            for f in group {
                let name = format!("field_l{:04}_c{:02}_{}.txt", state.step_l, j, f.component);
                let mut file = fs::File::create(out_dir.join(name))?;
                f.write_dump(&mut file)?;
            }
        }
        let _ = comps;
    }
    Ok(())
}

/// Drive a full run, writing `monitors.csv` and field dumps at the
/// configured cadence. Prints the summary line on success.
pub fn cmd_run(config: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out_dir)?;
    let atlas = config.build_atlas()?;
    let scheme = Scheme::new(&atlas, config.scheme.clone())?;
    let h = initial_condition(&config.ic, &atlas)?;
    let mut state = scheme.init(h)?;
    if config.dump_every > 0 {
        dump_state(&state, out_dir)?;
    }
    let dump_every = config.dump_every;
    let verbosity = config.verbosity;
    scheme.run(&mut state, |s| {
        if verbosity > 1 {
            let last = s.monitors.last().expect("step event");
            eprintln!(
                "step {}: sup_v_r={:.6} sup_r={:.6} sup_div={:.3e}",
                s.step_l, last.sup_v_r, last.sup_r, last.sup_div
            );
        }
        if dump_every > 0 && s.step_l % dump_every == 0 {
            dump_state(s, out_dir)?;
        }
        Ok(())
    })?;

    let mut file = fs::File::create(out_dir.join("monitors.csv"))?;
    write_monitors_csv(&state.monitors, &mut file)?;

    // step events are the rows with m = p = -1 and chart = -1
    let mut max_sup_v_r = 0.0f64;
    let mut max_sup_r = 0.0f64;
    for rec in &state.monitors {
        if rec.m == -1 && rec.p == -1 && rec.chart == -1 && rec.l >= 1 {
            max_sup_v_r = max_sup_v_r.max(rec.sup_v_r);
            max_sup_r = max_sup_r.max(rec.sup_r);
        }
    }
    println!(
        "OK steps={} max_sup_v_r={} max_sup_r={}",
        config.scheme.steps_l, max_sup_v_r, max_sup_r
    );
    Ok(RunSummary {
        steps: config.scheme.steps_l,
        max_sup_v_r,
        max_sup_r,
    })
}

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// A 17x17 Dirichlet box chart used by the Green-path check.
fn green_check_chart() -> ChartGeometry {
    let n = 2;
    let nodes = 17;
    let grid = Arc::new(ChartGrid {
        chart_id: 0,
        dims: vec![nodes; n],
        spacing: 1.0 / (nodes - 1) as f64,
        periodic: vec![false; n],
        origin: vec![0.0; n],
        global_offset: vec![0; n],
        global_nodes: 4 * nodes,
    });
    let len = grid.len();
    let mut coeff_a = TensorGrid::zeros(len, n * n);
    for node in 0..len {
        let b = coeff_a.at_mut(node);
        b[0] = 1.0;
        b[3] = 1.0;
    }
    ChartGeometry {
        chart_id: 0,
        grid,
        domain_lo: vec![0.0; n],
        domain_hi: vec![1.0; n],
        metric: coeff_a.clone(),
        coeff_a,
        coeff_b: TensorGrid::zeros(len, n),
        christoffel: TensorGrid::zeros(len, n * n * n),
        coeff_a_grad: TensorGrid::zeros(len, n * n * n),
        coeff_b_grad: TensorGrid::zeros(len, n * n),
        flat_coefficients: true,
    }
}

/// Build the atlas and run the invariant suite; prints one line per check.
pub fn cmd_validate(config: &RunConfig) -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();
    let atlas = match config.build_atlas() {
        Ok(atlas) => {
            checks.push(CheckResult {
                name: "atlas_coverage",
                passed: true,
                detail: format!(
                    "{} charts on a {}^{} lattice",
                    atlas.charts.len(),
                    atlas.global_nodes,
                    atlas.n
                ),
            });
            atlas
        }
        Err(e) => {
            checks.push(CheckResult {
                name: "atlas_coverage",
                passed: false,
                detail: format!("{e}"),
            });
            print_checks(&checks, config.verbosity);
            return Ok(checks);
        }
    };
    if config.verbosity > 0 {
        println!("{}", atlas.summary());
    }

    let defect = atlas.partition_defect();
    checks.push(CheckResult {
        name: "partition_of_unity",
        passed: defect <= 1e-12,
        detail: format!("max |sum phi - 1| = {defect:.3e}"),
    });

    // transition round trip: j -> k -> j translation sums to 0 mod 1, and
    // the field transfer composes to the identity on the overlap
    let mut transition_ok = true;
    let mut transition_detail = String::from("exact");
    'outer: for j in 0..atlas.charts.len() {
        for &k in &atlas.proper_neighbors(j) {
            let t_jk = atlas.transition(j, k).unwrap();
            let t_kj = atlas.transition(k, j).unwrap();
            for (a, b) in t_jk.iter().zip(&t_kj) {
                let s = (a + b).rem_euclid(1.0);
                if s.abs() > 1e-15 && (s - 1.0).abs() > 1e-15 {
                    transition_ok = false;
                    transition_detail = format!("pair ({j},{k}) composes to {s}");
                    break 'outer;
                }
            }
            let f = ChartField::from_fn(
                atlas.charts[j].grid.clone(),
                Component::Scalar,
                0.0,
                |x| x.iter().sum::<f64>(),
            );
            let fwd = grid::transfer(&f, &atlas.charts[k].grid)?;
            let fk = ChartField {
                grid: atlas.charts[k].grid.clone(),
                component: Component::Scalar,
                values: fwd.values,
                tau: 0.0,
            };
            let back = grid::transfer(&fk, &atlas.charts[j].grid)?;
            for idx in 0..f.values.len() {
                if back.mask[idx] && back.values[idx] != f.values[idx] {
                    transition_ok = false;
                    transition_detail = format!("pair ({j},{k}) transfer not exact");
                    break 'outer;
                }
            }
        }
    }
    checks.push(CheckResult {
        name: "transition_roundtrip",
        passed: transition_ok,
        detail: transition_detail,
    });

    let min_eig = atlas
        .charts
        .iter()
        .map(|c| c.min_ellipticity())
        .fold(f64::INFINITY, f64::min);
    checks.push(CheckResult {
        name: "ellipticity",
        passed: min_eig >= 0.5,
        detail: format!("min eigenvalue of a = {min_eig:.6} (required 0.5)"),
    });

    // Green path equivalence on a 17^2 chart
    let chart = green_check_chart();
    let gm = assemble_green_matrix(&chart, PressureOperator::Laplace)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let mut max_dev = 0.0f64;
    for _ in 0..3 {
        let f: Vec<f64> = (0..chart.grid.len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let g: Vec<f64> = (0..gm.boundary.len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let direct = solve_dirichlet(&DirichletProblem {
            geometry: &chart,
            operator: PressureOperator::Laplace,
            rhs: &f,
            boundary: &g,
        })?;
        let conv = gm.convolve(&chart.grid, &f, &g);
        for (a, b) in conv.iter().zip(&direct.pressure.values) {
            max_dev = max_dev.max((a - b).abs());
        }
    }
    checks.push(CheckResult {
        name: "green_path_equivalence",
        passed: max_dev <= 1e-10,
        detail: format!("max |convolution - direct| = {max_dev:.3e} on 17^2"),
    });

    // kernel mass with the configured diffusion scale
    let kernel = GaussianKernel::new(
        2,
        vec![1.0, 0.0, 0.0, 1.0],
        (config.scheme.rho * config.scheme.nu).max(1e-12),
    )?;
    let mass = kernel.quadrature_mass(1.0, 201)?;
    checks.push(CheckResult {
        name: "kernel_mass",
        passed: (mass - 1.0).abs() <= 1e-6,
        detail: format!("trapezoid mass = {mass:.9}"),
    });

    print_checks(&checks, config.verbosity);
    Ok(checks)
}

fn print_checks(checks: &[CheckResult], _verbosity: usize) {
    for c in checks {
        println!(
            "{:<24} {}  {}",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.detail
        );
    }
}

pub struct ConvergenceRow {
    pub level: usize,
    pub h: f64,
    pub err_sup: f64,
    pub order: f64,
}

/// Refinement study against the exact Taylor-Green decay: same physical
/// problem at h, h/2, ... with the tau substep count scaled like h^-2.
pub fn cmd_convergence(
    config: &RunConfig,
    levels: usize,
    out_dir: &Path,
) -> Result<Vec<ConvergenceRow>> {
    if levels < 1 {
        return Err(Error::Config {
            field: "levels".into(),
            reason: "need at least 1 refinement level".into(),
        });
    }
    let amplitude = match &config.ic {
        InitialCondition::TaylorGreen { amplitude } => Some(*amplitude),
        InitialCondition::Zero => None,
        _ => {
            return Err(Error::Config {
                field: "ic".into(),
                reason: "convergence study needs taylor_green or zero initial data".into(),
            })
        }
    };
    if config.n != 2 {
        return Err(Error::Config {
            field: "n".into(),
            reason: "the exact Taylor-Green oracle is two-dimensional".into(),
        });
    }
    fs::create_dir_all(out_dir)?;

    let mut rows: Vec<ConvergenceRow> = Vec::new();
    for level in 0..levels {
        let factor = 1usize << level;
        let mut cfg = config.clone();
        cfg.resolution = if config.charts_per_axis == 1 {
            config.resolution * factor
        } else {
            (config.resolution - 1) * factor + 1
        };
        cfg.scheme.substeps = config.scheme.substeps * factor * factor;
        let atlas = cfg.build_atlas()?;
        let h = atlas.spacing;
        let scheme = Scheme::new(&atlas, cfg.scheme.clone())?;
        let data = initial_condition(&cfg.ic, &atlas)?;
        let mut state = scheme.init(data)?;
        scheme.run(&mut state, |_| Ok(()))?;

        // physical time after steps_l unit tau steps
        let t: f64 = (1..=cfg.scheme.steps_l)
            .map(|l| {
                if cfg.scheme.rho_decay {
                    cfg.scheme.rho / l as f64
                } else {
                    cfg.scheme.rho
                }
            })
            .sum();
        let err = match amplitude {
            None => 0.0,
            Some(amp) => {
                use std::f64::consts::PI;
                let decay = (-8.0 * PI * PI * cfg.scheme.nu * t).exp();
                let ggrid = global_grid(&atlas);
                let nc = atlas.charts.len();
                let mut err = 0.0f64;
                for i in 0..2 {
                    let refs: Vec<&ChartField> = (0..nc).map(|j| &state.v[j][i]).collect();
                    let gv = atlas.assemble_global(&refs);
                    let exact = ChartField::from_fn(
                        ggrid.clone(),
                        Component::Velocity(i),
                        0.0,
                        move |x| {
                            let base = if i == 0 {
                                (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos()
                            } else {
                                -(2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).sin()
                            };
                            amp * decay * base
                        },
                    );
                    for (a, b) in gv.iter().zip(&exact.values) {
                        err = err.max((a - b).abs());
                    }
                }
                err
            }
        };
        let order = match rows.last() {
            Some(prev) if prev.h != h && err > 0.0 && prev.err_sup > 0.0 => {
                (prev.err_sup / err).ln() / (prev.h / h).ln()
            }
            _ => f64::NAN,
        };
        rows.push(ConvergenceRow {
            level,
            h,
            err_sup: err,
            order,
        });
    }

    let mut file = fs::File::create(out_dir.join("convergence.csv"))?;
    writeln!(file, "level,h,err_sup,order")?;
    println!("level,h,err_sup,order");
    for r in &rows {
        writeln!(file, "{},{},{},{}", r.level, r.h, r.err_sup, r.order)?;
        println!("{},{},{},{}", r.level, r.h, r.err_sup, r.order);
    }
    Ok(rows)
}

/// Resolve the configuration for a subcommand invocation.
pub fn load_config(path: Option<&PathBuf>, out_override: Option<&PathBuf>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = out_override {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::read_monitors_csv;

    #[test]
    fn run_zero_steps_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.resolution = 16;
        cfg.charts_per_axis = 1;
        cfg.scheme.steps_l = 0;
        cfg.scheme.substeps = 4;
        let summary = cmd_run(&cfg, dir.path()).unwrap();
        assert_eq!(summary.steps, 0);
        let text = fs::read_to_string(dir.path().join("monitors.csv")).unwrap();
        let mut rd = std::io::BufReader::new(text.as_bytes());
        let records = read_monitors_csv(&mut rd).unwrap();
        // only the init step event is recorded
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].l, 0);
    }

    #[test]
    fn run_zero_ic_all_zero_monitors() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.resolution = 16;
        cfg.charts_per_axis = 1;
        cfg.ic = InitialCondition::Zero;
        cfg.scheme.steps_l = 2;
        cfg.scheme.substeps = 4;
        let summary = cmd_run(&cfg, dir.path()).unwrap();
        assert_eq!(summary.max_sup_v_r, 0.0);
        assert_eq!(summary.max_sup_r, 0.0);
    }

    #[test]
    fn validate_default_config_passes() {
        let mut cfg = RunConfig::default();
        cfg.verbosity = 0;
        cfg.resolution = 17;
        let checks = cmd_validate(&cfg).unwrap();
        for c in &checks {
            assert!(c.passed, "{} failed: {}", c.name, c.detail);
        }
    }

    #[test]
    fn validate_flags_bad_ellipticity() {
        let mut cfg = RunConfig::default();
        cfg.verbosity = 0;
        cfg.resolution = 17;
        cfg.coeff_preset = crate::config::CoeffChoice::Conformal;
        cfg.conformal_eps = 0.6;
        // the preset itself rejects eps >= 0.5 at atlas build
        let checks = cmd_validate(&cfg).unwrap();
        let atlas_check = &checks[0];
        assert!(!atlas_check.passed);
        assert!(atlas_check.detail.contains("conformal_eps"));
    }

    #[test]
    fn validate_flags_small_overlap() {
        let mut cfg = RunConfig::default();
        cfg.verbosity = 0;
        cfg.overlap_fraction = 0.01;
        cfg.resolution = 16;
        let checks = cmd_validate(&cfg).unwrap();
        assert!(!checks[0].passed, "coverage should fail");
    }
}
