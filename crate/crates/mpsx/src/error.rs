use thiserror::Error;

/// Errors produced by the analysis pipeline.
#[derive(Error, Debug)]
pub enum MpsxError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("cap exceeded for {what}: needed {needed}, cap {cap}")]
    CapExceeded {
        what: &'static str,
        needed: usize,
        cap: usize,
    },

    #[error("structure uncertain at block ({block_row},{block_col}): residual {residual:.3e}")]
    StructureUncertain {
        block_row: usize,
        block_col: usize,
        residual: f64,
    },

    #[error("basis is not closed under the requested operation: {0}")]
    InvalidMode(String),

    #[error("tensor is not expressible in the given structured basis (residual {0:.3e})")]
    InconsistentBasis(f64),

    #[error("tensor is not stable: {0}")]
    NotStable(String),

    #[error("boundary matrix violates the translational-invariance block constraints (residual {0:.3e})")]
    NotTi(f64),

    #[error("syntax error at byte {pos}: {msg}")]
    ParseError { pos: usize, msg: String },

    #[error("symbol `{symbol}` is assigned to two different sectors: {first} and {second}")]
    SectorConflict {
        symbol: String,
        first: String,
        second: String,
    },

    #[error("lower tensor violates the structural table: {0}")]
    InvalidAlow(String),

    #[error("inputs are not equivalent state families")]
    NotEquivalent,

    #[error("no gauge relation found: {0} (residual {1:.3e})")]
    RelationNotFound(String, f64),

    #[error("linear algebra backend error: {0}")]
    Linalg(#[from] ndarray_linalg::error::LinalgError),
}

pub type Result<T> = std::result::Result<T, MpsxError>;
