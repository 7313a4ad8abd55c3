//! Run configuration: a flat `key = value` document (one option per line,
//! `#` comments), its serializer, and the initial-condition presets.
//!
//! Parsing is strict: unknown keys and out-of-range values are errors naming
//! the offending line or field. `serialize` followed by `parse` reproduces
//! the configuration exactly.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    build_torus_atlas, coefficient_preset, Atlas, CoefficientPreset,
};
use crate::grid::{self, ChartField, ChartGrid, Component};
use crate::scheme::{ControlVariant, SchemeConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    Zero,
    TaylorGreen { amplitude: f64 },
    RandomDivFree { seed: u64, modes: usize, amplitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoeffChoice {
    Euclidean,
    Conformal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n: usize,
    pub charts_per_axis: usize,
    pub overlap_fraction: f64,
    pub resolution: usize,
    pub coeff_preset: CoeffChoice,
    pub conformal_eps: f64,
    pub ic: InitialCondition,
    pub scheme: SchemeConfig,
    /// Dump fields every k integer steps (0 = never).
    pub dump_every: usize,
    pub out_dir: String,
    pub verbosity: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: 2,
            charts_per_axis: 2,
            overlap_fraction: 0.25,
            resolution: 32,
            coeff_preset: CoeffChoice::Euclidean,
            conformal_eps: 0.1,
            ic: InitialCondition::TaylorGreen { amplitude: 1.0 },
            scheme: SchemeConfig::default(),
            dump_every: 0,
            out_dir: "out".into(),
            verbosity: 1,
        }
    }
}

fn ic_fields(ic: &InitialCondition) -> (&'static str, f64, u64, usize) {
    match ic {
        InitialCondition::Zero => ("zero", 0.0, 12345, 2),
        InitialCondition::TaylorGreen { amplitude } => ("taylor_green", *amplitude, 12345, 2),
        InitialCondition::RandomDivFree {
            seed,
            modes,
            amplitude,
        } => ("random_divfree", *amplitude, *seed, *modes),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        // carry the ic pieces separately; assembled after the scan
        let (mut ic_kind, mut ic_amp, mut ic_seed, mut ic_modes) = ic_fields(&cfg.ic);
        let mut ic_kind_owned = ic_kind.to_string();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or(Error::ConfigParse {
                line,
                reason: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |reason: String| Error::ConfigParse { line, reason };
            let as_f64 = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|e| bad(format!("key `{key}`: bad real `{v}`: {e}")))
            };
            let as_usize = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|e| bad(format!("key `{key}`: bad integer `{v}`: {e}")))
            };
            let as_u64 = |v: &str| -> Result<u64> {
                v.parse()
                    .map_err(|e| bad(format!("key `{key}`: bad integer `{v}`: {e}")))
            };
            let as_bool = |v: &str| -> Result<bool> {
                match v {
                    "true" => Ok(true),
                    "false" => Ok(false),
                    _ => Err(bad(format!("key `{key}`: bad bool `{v}`"))),
                }
            };
            match key {
                "n" => cfg.n = as_usize(value)?,
                "charts_per_axis" => cfg.charts_per_axis = as_usize(value)?,
                "overlap_fraction" => cfg.overlap_fraction = as_f64(value)?,
                "resolution" => cfg.resolution = as_usize(value)?,
                "coeff_preset" => {
                    cfg.coeff_preset = match value {
                        "euclidean" => CoeffChoice::Euclidean,
                        "conformal" => CoeffChoice::Conformal,
                        _ => return Err(bad(format!("unknown coeff_preset `{value}`"))),
                    }
                }
                "conformal_eps" => cfg.conformal_eps = as_f64(value)?,
                "ic" => {
                    match value {
                        "zero" | "taylor_green" | "random_divfree" => {}
                        _ => return Err(bad(format!("unknown ic `{value}`"))),
                    }
                    ic_kind_owned = value.to_string();
                }
                "ic_amplitude" => ic_amp = as_f64(value)?,
                "ic_seed" => ic_seed = as_u64(value)?,
                "ic_modes" => ic_modes = as_usize(value)?,
                "rho" => cfg.scheme.rho = as_f64(value)?,
                "big_c" => cfg.scheme.big_c = as_f64(value)?,
                "nu" => cfg.scheme.nu = as_f64(value)?,
                "tol_p" => cfg.scheme.tol_p = as_f64(value)?,
                "tol_m" => cfg.scheme.tol_m = as_f64(value)?,
                "max_p" => cfg.scheme.max_p = as_usize(value)?,
                "max_m" => cfg.scheme.max_m = as_usize(value)?,
                "substeps" => cfg.scheme.substeps = as_usize(value)?,
                "steps_l" => cfg.scheme.steps_l = as_usize(value)?,
                "control_variant" => {
                    cfg.scheme.control_variant = match value {
                        "none" => ControlVariant::None,
                        "simple" => ControlVariant::Simple,
                        "switched" => ControlVariant::Switched,
                        _ => return Err(bad(format!("unknown control_variant `{value}`"))),
                    }
                }
                "normalize_kernel" => cfg.scheme.normalize_kernel = as_bool(value)?,
                "rho_decay" => cfg.scheme.rho_decay = as_bool(value)?,
                "velocity_bc" => cfg.scheme.velocity_bc = as_bool(value)?,
                "strict_contraction" => cfg.scheme.strict_contraction = as_bool(value)?,
                "abort_on_divergence" => cfg.scheme.abort_on_divergence = as_bool(value)?,
                "dump_every" => cfg.dump_every = as_usize(value)?,
                "out_dir" => cfg.out_dir = value.to_string(),
                "verbosity" => cfg.verbosity = as_usize(value)?,
                _ => {
                    return Err(bad(format!("unknown key `{key}`")));
                }
            }
        }
        ic_kind = match ic_kind_owned.as_str() {
            "zero" => "zero",
            "taylor_green" => "taylor_green",
            "random_divfree" => "random_divfree",
            _ => unreachable!(),
        };
        cfg.ic = match ic_kind {
            "zero" => InitialCondition::Zero,
            "taylor_green" => InitialCondition::TaylorGreen { amplitude: ic_amp },
            _ => InitialCondition::RandomDivFree {
                seed: ic_seed,
                modes: ic_modes,
                amplitude: ic_amp,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn serialize(&self) -> String {
        let (ic_kind, ic_amp, ic_seed, ic_modes) = ic_fields(&self.ic);
        let preset = match self.coeff_preset {
            CoeffChoice::Euclidean => "euclidean",
            CoeffChoice::Conformal => "conformal",
        };
        let s = &self.scheme;
        format!(
            "n = {}\n\
             charts_per_axis = {}\n\
             overlap_fraction = {}\n\
             resolution = {}\n\
             coeff_preset = {preset}\n\
             conformal_eps = {}\n\
             ic = {ic_kind}\n\
             ic_amplitude = {ic_amp}\n\
             ic_seed = {ic_seed}\n\
             ic_modes = {ic_modes}\n\
             rho = {}\n\
             big_c = {}\n\
             nu = {}\n\
             tol_p = {}\n\
             tol_m = {}\n\
             max_p = {}\n\
             max_m = {}\n\
             substeps = {}\n\
             steps_l = {}\n\
             control_variant = {}\n\
             normalize_kernel = {}\n\
             rho_decay = {}\n\
             velocity_bc = {}\n\
             strict_contraction = {}\n\
             abort_on_divergence = {}\n\
             dump_every = {}\n\
             out_dir = {}\n\
             verbosity = {}\n",
            self.n,
            self.charts_per_axis,
            self.overlap_fraction,
            self.resolution,
            self.conformal_eps,
            s.rho,
            s.big_c,
            s.nu,
            s.tol_p,
            s.tol_m,
            s.max_p,
            s.max_m,
            s.substeps,
            s.steps_l,
            s.control_variant,
            s.normalize_kernel,
            s.rho_decay,
            s.velocity_bc,
            s.strict_contraction,
            s.abort_on_divergence,
            self.dump_every,
            self.out_dir,
            self.verbosity,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.n) {
            return Err(Error::Config {
                field: "n".into(),
                reason: format!("dimension must be 2 or 3, got {}", self.n),
            });
        }
        if self.resolution < 8 {
            return Err(Error::Config {
                field: "resolution".into(),
                reason: format!("need >= 8, got {}", self.resolution),
            });
        }
        if !(self.overlap_fraction > 0.0 && self.overlap_fraction < 0.5) {
            return Err(Error::Config {
                field: "overlap_fraction".into(),
                reason: format!("must lie in (0, 0.5), got {}", self.overlap_fraction),
            });
        }
        if self.coeff_preset == CoeffChoice::Conformal && self.conformal_eps.abs() >= 0.5 {
            return Err(Error::Config {
                field: "conformal_eps".into(),
                reason: format!("|eps| must stay below 0.5, got {}", self.conformal_eps),
            });
        }
        if let InitialCondition::RandomDivFree { modes, .. } = &self.ic {
            if *modes == 0 {
                return Err(Error::Config {
                    field: "ic_modes".into(),
                    reason: "need at least one mode".into(),
                });
            }
        }
        if let InitialCondition::TaylorGreen { .. } = &self.ic {
            if self.n != 2 && self.charts_per_axis > 0 {
                // 3D variant exists; only the 2D one is an exact solution
            }
        }
        self.scheme.validate(self.n)?;
        Ok(())
    }

    /// Build the configured atlas with its coefficient preset applied.
    pub fn build_atlas(&self) -> Result<Atlas> {
        let mut atlas = build_torus_atlas(
            self.n,
            self.charts_per_axis,
            self.overlap_fraction,
            self.resolution,
        )?;
        let preset = match self.coeff_preset {
            CoeffChoice::Euclidean => CoefficientPreset::Euclidean,
            CoeffChoice::Conformal => CoefficientPreset::Conformal(self.conformal_eps),
        };
        coefficient_preset(preset, &mut atlas)?;
        Ok(atlas)
    }
}

/// Global periodic lattice grid of an atlas (the assembly target).
pub fn global_grid(atlas: &Atlas) -> Arc<ChartGrid> {
    Arc::new(ChartGrid {
        chart_id: usize::MAX,
        dims: vec![atlas.global_nodes; atlas.n],
        spacing: atlas.spacing,
        periodic: vec![true; atlas.n],
        origin: vec![0.0; atlas.n],
        global_offset: vec![0; atlas.n],
        global_nodes: atlas.global_nodes,
    })
}

/// Sample the initial velocity per chart. Fields are generated once on the
/// global lattice and restricted, so overlapping charts receive bitwise-equal
/// samples.
pub fn initial_condition(
    ic: &InitialCondition,
    atlas: &Atlas,
) -> Result<Vec<Vec<ChartField>>> {
    let n = atlas.n;
    let ggrid = global_grid(atlas);
    let global: Vec<ChartField> = match ic {
        InitialCondition::Zero => (0..n)
            .map(|i| ChartField::zeros(ggrid.clone(), Component::Velocity(i), 0.0))
            .collect(),
        InitialCondition::TaylorGreen { amplitude } => taylor_green_global(&ggrid, n, *amplitude),
        InitialCondition::RandomDivFree {
            seed,
            modes,
            amplitude,
        } => random_divfree_global(&ggrid, n, *seed, *modes, *amplitude),
    };
    let mut out = Vec::with_capacity(atlas.charts.len());
    for j in 0..atlas.charts.len() {
        let fields: Vec<ChartField> = (0..n)
            .map(|i| atlas.restrict_to_chart(&global[i].values, j, Component::Velocity(i), 0.0))
            .collect();
        out.push(fields);
    }
    Ok(out)
}

fn taylor_green_global(grid: &Arc<ChartGrid>, n: usize, amp: f64) -> Vec<ChartField> {
    use std::f64::consts::PI;
    match n {
        2 => vec![
            ChartField::from_fn(grid.clone(), Component::Velocity(0), 0.0, move |x| {
                amp * (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos()
            }),
            ChartField::from_fn(grid.clone(), Component::Velocity(1), 0.0, move |x| {
                -amp * (2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).sin()
            }),
        ],
        _ => vec![
            ChartField::from_fn(grid.clone(), Component::Velocity(0), 0.0, move |x| {
                amp * (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos() * (2.0 * PI * x[2]).cos()
            }),
            ChartField::from_fn(grid.clone(), Component::Velocity(1), 0.0, move |x| {
                -amp * (2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).sin() * (2.0 * PI * x[2]).cos()
            }),
            ChartField::zeros(grid.clone(), Component::Velocity(2), 0.0),
        ],
    }
}

/// Divergence-free field from a stream function (2D) or vector potential
/// (3D), differentiated with the crate's own stencils so the discrete
/// divergence vanishes by stencil commutativity.
fn random_divfree_global(
    grid: &Arc<ChartGrid>,
    n: usize,
    seed: u64,
    modes: usize,
    amplitude: f64,
) -> Vec<ChartField> {
    use std::f64::consts::PI;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample_potential = |comp_seed: u64| -> ChartField {
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ comp_seed.wrapping_mul(0x9e3779b97f4a7c15));
        let m = modes as i64;
        let mut terms: Vec<(Vec<f64>, f64, f64)> = Vec::new();
        let mut kvec = vec![0i64; n];
        let total = (2 * m + 1).pow(n as u32);
        for flat in 0..total {
            let mut rem = flat;
            for a in 0..n {
                kvec[a] = rem % (2 * m + 1) - m;
                rem /= 2 * m + 1;
            }
            if kvec.iter().all(|&k| k == 0) {
                continue;
            }
            let c: f64 = prng.gen_range(-1.0..1.0);
            let phase: f64 = prng.gen_range(0.0..2.0 * PI);
            terms.push((kvec.iter().map(|&k| k as f64).collect(), c, phase));
        }
        ChartField::from_fn(grid.clone(), Component::Scalar, 0.0, move |x| {
            let mut acc = 0.0;
            for (k, c, phase) in &terms {
                let dot: f64 = k.iter().zip(x).map(|(ki, xi)| ki * xi).sum();
                acc += c * (2.0 * PI * dot + phase).sin();
            }
            acc
        })
    };

    let mut v: Vec<ChartField> = if n == 2 {
        let psi = sample_potential(rng.gen());
        let vx = grid::partial(&psi, 1);
        let mut vy = grid::partial(&psi, 0);
        vy.scale(-1.0);
        vec![vx, vy]
    } else {
        let a: Vec<ChartField> = (0..3).map(|_| sample_potential(rng.gen())).collect();
        // v = curl A with the same stencils
        let d = |f: &ChartField, axis: usize| grid::partial(f, axis);
        let mut vx = d(&a[2], 1);
        vx.scaled_add(-1.0, &d(&a[1], 2));
        let mut vy = d(&a[0], 2);
        vy.scaled_add(-1.0, &d(&a[2], 0));
        let mut vz = d(&a[1], 0);
        vz.scaled_add(-1.0, &d(&a[0], 1));
        vec![vx, vy, vz]
    };
    let sup = v.iter().map(|f| f.sup_norm()).fold(0.0f64, f64::max);
    if sup > 0.0 {
        let s = amplitude / sup;
        for f in v.iter_mut() {
            f.scale(s);
        }
    }
    for (i, f) in v.iter_mut().enumerate() {
        f.component = Component::Velocity(i);
    }
    v
}
