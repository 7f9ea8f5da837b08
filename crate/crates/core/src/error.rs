use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Parse(String),
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("unknown algebra `{0}`")]
    UnknownAlgebra(String),
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("table length mismatch for `{symbol}` in `{algebra}`: expected {expected}, got {got}")]
    TableLength {
        symbol: String,
        algebra: String,
        expected: usize,
        got: usize,
    },
    #[error("entry out of range for `{symbol}` in `{algebra}`: table[{index}] = {value} but size is {size}")]
    EntryOutOfRange {
        symbol: String,
        algebra: String,
        index: usize,
        value: usize,
        size: usize,
    },
    #[error("arity mismatch: expected {expected} arguments, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("closure cap exceeded ({0} elements)")]
    ClosureCap(usize),
    #[error("cap exceeded during {what} ({cap})")]
    Cap { what: String, cap: usize },
    #[error("{0} is not a congruence")]
    NotACongruence(String),
    #[error("identity failure: {0}")]
    IdentityFailed(String),
    #[error("input contract violated: {0}")]
    InputContract(String),
    #[error("undecided at this scale: {0}")]
    Undecided(String),
    #[error("similarity undecided: {0}")]
    SimilarityUndecided(String),
    #[error("catalog is not residually small (offender: {offender})")]
    NotResiduallySmall { offender: String },
    #[error("provenance missing for tuple {0}")]
    ProvenanceMissing(usize),
    #[error("method unavailable: {0}")]
    MethodUnavailable(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
