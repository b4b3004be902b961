//! Library for checking whether synthetically generated EEG-feature
//! distributions preserve the transition geometry of real recordings.
//!
//! The pipeline: load tabular feature recordings ([`data`]), z-score them
//! against each participant's baseline task portion ([`normalize`]), train a
//! conditional packed-critic WGAN-GP on the normalized vectors ([`gan`]),
//! then compare entropic-transport energies between task-condition
//! distributions for real versus synthetic data ([`sbp`], [`harness`]).
//! [`adaptive`] turns the rolling transport energy into a simulated
//! closed-loop difficulty controller.

pub mod adaptive;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod gan;
pub mod harness;
pub mod normalize;
pub mod sbp;
pub mod selftest;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("required column `{0}` is missing from the header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: value `{value}` is not a finite number")]
    NonFiniteValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: unknown task portion `{label}` (expected P1, P2, P3 or P4)")]
    UnknownPortion { row: usize, label: String },
    #[error("file `{0}` contains no data rows")]
    EmptyFile(String),
    #[error("row {row}: expected {expected} fields, found {found}")]
    MalformedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("no samples for participant `{participant}` in portion {portion}")]
    EmptyGroup {
        participant: String,
        portion: String,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("Sinkhorn did not converge: marginal error {marginal_error:.3e} after {iterations} iterations (tolerance {tolerance:.1e})")]
    NotConverged {
        iterations: usize,
        marginal_error: f64,
        tolerance: f64,
    },
    #[error("numerical overflow in log-domain solver (non-finite {0})")]
    NumericalOverflow(&'static str),
    #[error("matrix is not symmetric positive semi-definite: {0}")]
    NotPSD(String),
    #[error("critic output must be a single scalar per row, got width {0}")]
    NonScalarOutput(usize),
    #[error("pack mixes conditions: {0}")]
    MixedConditionPack(String),
    #[error("no group in the batch has at least 2 real and 2 generated samples")]
    NoEligibleGroups,
    #[error("training diverged at step {step}: {quantity} became non-finite")]
    DivergenceDetected { step: usize, quantity: String },
    #[error("unknown condition: {0}")]
    UnknownCondition(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("participant sets differ between tables: {0}")]
    ParticipantMismatch(String),
    #[error("rank correlation needs at least 3 participants, got {0}")]
    TooFewParticipants(usize),
    #[error("energy column for transition `{0}` is empty")]
    EmptyColumn(String),
    #[error("feature schemas differ: {0}")]
    SchemaMismatch(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

impl Error {
    /// Wrap an I/O error with the path it occurred on.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI maps this error to: 1 for input/validation
    /// problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotConverged { .. }
            | Error::NumericalOverflow(_)
            | Error::DivergenceDetected { .. }
            | Error::Io { .. }
            | Error::MalformedCheckpoint(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
