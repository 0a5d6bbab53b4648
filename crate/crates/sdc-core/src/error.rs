//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. Variants are
//! deliberately coarse: they distinguish *what kind* of contract was violated
//! (bad file, bad shape, degenerate numbers, ...) and carry a human-readable
//! detail string. The CLI maps each variant to a stable machine-readable code.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Unrecognized magic, version, dtype or layout code in a binary container.
    #[error("format error: {0}")]
    Format(String),

    /// Header and payload disagree (truncated or padded file).
    #[error("corrupt file: {0}")]
    Corrupt(String),

    /// Input values violate a data contract (non-finite entries, missing ids, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Fold construction is impossible for the requested sizes.
    #[error("split error: {0}")]
    Split(String),

    /// Reliability estimation is impossible (e.g. no repeated stimuli).
    #[error("noise ceiling error: {0}")]
    NoiseCeiling(String),

    /// A voxel selection came back empty.
    #[error("empty selection: {0}")]
    EmptySelection(String),

    /// A synthetic-data specification is internally inconsistent.
    #[error("synth spec error: {0}")]
    Spec(String),

    /// A numeric computation received or produced non-finite values.
    #[error("numerics error: {0}")]
    Numerics(String),

    /// Iterative optimisation produced non-finite loss.
    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    /// Matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A linear solve failed (singular or not positive definite).
    #[error("solver error: {0}")]
    Solver(String),

    /// Cosine against a zero-norm vector; carries the offending row.
    #[error("zero-norm vector at row {0}")]
    ZeroVector(usize),

    /// A concept mask with an empty support where one is required.
    #[error("empty mask: {0}")]
    EmptyMask(String),

    /// A voxel is missing from the atlas, or atlas ids are invalid.
    #[error("atlas error: {0}")]
    Atlas(String),

    /// Consistency scoring is impossible (e.g. fewer than two participants).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// A category grouping references no concepts.
    #[error("group error: {0}")]
    Group(String),

    /// Input is too degenerate for the algorithm (e.g. all-duplicate rows).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A caller-supplied argument is out of range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable lowercase code for machine-readable error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Corrupt(_) => "corrupt_file",
            Error::Data(_) => "data",
            Error::Split(_) => "split",
            Error::NoiseCeiling(_) => "noise_ceiling",
            Error::EmptySelection(_) => "empty_selection",
            Error::Spec(_) => "spec",
            Error::Numerics(_) => "numerics",
            Error::TrainingDiverged(_) => "training_diverged",
            Error::Shape(_) => "shape",
            Error::Solver(_) => "solver",
            Error::ZeroVector(_) => "zero_vector",
            Error::EmptyMask(_) => "empty_mask",
            Error::Atlas(_) => "atlas",
            Error::Consistency(_) => "consistency",
            Error::Group(_) => "group",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
