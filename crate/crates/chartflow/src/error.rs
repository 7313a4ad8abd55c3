//! Error type shared across the crate.
//!
//! Every failure carries enough coordinates (config field, or `(l, m, p, chart)`
//! of the scheme loop) to point at the culprit directly.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("config parse error at line {line}: {reason}")]
    ConfigParse { line: usize, reason: String },

    #[error("atlas construction: {0}")]
    Atlas(String),

    #[error("grid operation: {0}")]
    Grid(String),

    #[error("singular metric at node {node} of chart {chart}")]
    SingularMetric { chart: usize, node: usize },

    #[error("ellipticity violated on chart {chart}: min eigenvalue {min_eig} < {required}")]
    Ellipticity {
        chart: usize,
        min_eig: f64,
        required: f64,
    },

    #[error("linear solve failed on chart {chart}: {reason}")]
    SolverFailure { chart: usize, reason: String },

    #[error("Green matrix size guard: chart {chart} has {interior} interior nodes (limit {limit})")]
    SizeGuard {
        chart: usize,
        interior: usize,
        limit: usize,
    },

    #[error(
        "p-subiteration not contracting at (l={l}, m={m}, chart={chart}): \
         ratio >= 1 for 3 consecutive iterations (last ratios {ratios:?}); reduce rho"
    )]
    NonContraction {
        l: usize,
        m: usize,
        chart: usize,
        ratios: Vec<f64>,
    },

    #[error(
        "m-iteration stagnated at (l={l}, m={m}): overlap mismatch {mismatch} \
         did not decrease over 5 iterations (tol_m = {tol})"
    )]
    MismatchStagnation {
        l: usize,
        m: usize,
        mismatch: f64,
        tol: f64,
    },

    #[error("non-finite value at (l={l}, m={m}, p={p}, chart={chart}, comp={comp})")]
    NonFinite {
        l: usize,
        m: usize,
        p: i64,
        chart: usize,
        comp: String,
    },

    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code per the CLI contract: 2 config, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::ConfigParse { .. } => 2,
            Error::Io(_) => 4,
            _ => 3,
        }
    }
}
