use thiserror::Error;

use crate::crossover::CrossoverOutcome;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid index: {0}")]
    InvalidIndex(String),

    #[error("alphabet size must be at least 2, got {0}")]
    InvalidAlphabet(usize),

    #[error("table does not sum to one (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("invalid probability table: {0}")]
    InvalidTable(String),

    #[error("support violation: q({cell}) > 0 but p({cell}) = 0")]
    SupportViolation { cell: usize },

    #[error("zero marginal probability at cell {cell}")]
    ZeroMarginal { cell: usize },

    #[error("symbol {symbol} out of range for alphabet of size {alphabet} (row {row}, column {col})")]
    OutOfRangeSymbol {
        row: usize,
        col: usize,
        symbol: usize,
        alphabet: usize,
    },

    #[error("empty sample set")]
    EmptySamples,

    #[error("too large: {0}")]
    TooLarge(String),

    #[error("graph is disconnected: {0}")]
    Disconnected(String),

    #[error("graph contains a cycle")]
    Cyclic,

    #[error("invalid edge set: {0}")]
    InvalidEdgeSet(String),

    #[error("edge ({0}, {1}) has a product pairwise marginal")]
    ProductEdge(usize, usize),

    #[error("inconsistent marginals: {0}")]
    InconsistentMarginals(String),

    #[error("distribution is not strictly positive")]
    NotStrictlyPositive,

    #[error("empirical table has zero cells and smoothing is disabled")]
    ZeroCellsWithoutSmoothing,

    #[error("information density variance {variance:e} is below tolerance with mutual information gap {gap:e}")]
    DegenerateInformationDensity { variance: f64, gap: f64 },

    #[error("solver did not converge after {restarts} restarts (best residual {:e})", best.constraint_residual)]
    SolverNonConvergence {
        restarts: usize,
        best: Box<CrossoverOutcome>,
    },

    #[error("parameter out of range: {0}")]
    ParameterOutOfRange(String),
}
