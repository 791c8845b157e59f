use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("weak instrument for {context}: first-stage F = {f_stat:.4}")]
    WeakInstrument { context: String, f_stat: f64 },

    #[error("index collision: {0}")]
    IndexCollision(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("rank deficient design: {0}")]
    RankDeficient(String),

    #[error("no convergence after {iters} iterations (residual norm {residual:.4e})")]
    NonConvergence { iters: usize, residual: f64 },

    #[error("under-identified system: rank {rank} < {needed} unknowns")]
    UnderIdentified { rank: usize, needed: usize },

    #[error("irrelevant instrument: {0}")]
    IrrelevantInstrument(String),

    #[error("models are not nested: {0}")]
    NotNested(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("zero scaling parameter: {0}")]
    ZeroScale(String),

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
