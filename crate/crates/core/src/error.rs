use alloc::string::String;

/// Errors raised anywhere in the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("block `{0}` does not match its gradient")]
    BlockMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("gradient oracle invalid: {0}")]
    OracleInvalid(String),
    #[error("insertion point `{0}` has no preceding affine op; merge unsupported")]
    MergeUnsupported(String),
    #[error("incompatible SSF entries: {0}")]
    IncompatibleEntries(String),
    #[error("C = {c} must satisfy 1 <= C <= M = {m}")]
    InvalidSelectionCount { c: usize, m: usize },
    #[error("query vector has zero norm")]
    DegenerateQuery,
    #[error("per-instance operation received a batch of {0} rows")]
    NotSingleInstance(usize),
    #[error("aggregation weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("payload mismatch: {0}")]
    PayloadMismatch(String),
    #[error("no feasible partition after {attempts} attempts (min {min_per_client} per client)")]
    PartitionInfeasible { attempts: usize, min_per_client: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> Error {
    Error::Shape {
        op,
        left: left.into(),
        right: right.into(),
    }
}
