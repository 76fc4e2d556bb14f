use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("bond override ({a}, {b}) does not name a lattice bond")]
    UnknownBond { a: usize, b: usize },

    #[error("invalid coupler parameters: {0}")]
    InvalidCoupler(String),

    #[error("site count {0} exceeds the 64-bit occupation mask")]
    TooManySites(usize),

    #[error("particle number {n} out of range for {l} sites")]
    InvalidParticleNumber { l: usize, n: usize },

    #[error("state {state} is not in the {l}-site, {n}-particle sector")]
    StateOutsideSector { state: String, l: usize, n: usize },

    #[error("site count mismatch: {0} vs {1}")]
    SiteCountMismatch(usize, usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error(
        "dimension {dim} exceeds the exact-diagonalization ceiling {ceiling}; use the Krylov propagator"
    )]
    AboveExactCeiling { dim: usize, ceiling: usize },

    #[error("Krylov step failed to converge: {0}")]
    KrylovNonConvergence(String),

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("invalid time grid: {0}")]
    InvalidTimeGrid(String),

    #[error("ergodic distribution requires an even site count, got {0}")]
    OddSiteCount(usize),

    #[error("invalid entanglement cut: {0}")]
    InvalidCut(String),

    #[error("entanglement reshape block of size {size} exceeds budget {budget}")]
    ReshapeBudget { size: usize, budget: usize },

    #[error("spectrum too small or fully degenerate: {0}")]
    DegenerateSpectrum(String),

    #[error("scar state needs even rows and columns, got {rows}x{cols}")]
    OddScarLattice { rows: usize, cols: usize },

    #[error("invalid state string {0:?}")]
    ParseState(String),

    #[error("confusion matrix for qubit {qubit} is not invertible (F0 + F1 = {sum})")]
    SingularConfusion { qubit: usize, sum: f64 },

    #[error("invalid readout spec: {0}")]
    InvalidReadout(String),

    #[error("dephasing fit failed: {0}")]
    FitFailed(String),

    #[error("invalid sweep plan: {0}")]
    InvalidPlan(String),

    #[error("configuration invalid:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
