//! Error type shared across the library.
//!
//! Variants split into two families: *validation* errors (bad arguments,
//! malformed files, shape mismatches — the caller gave us something we refuse
//! to work on) and *runtime* errors (I/O failures, numerical divergence during
//! training). The CLI maps the former to exit code 1 and the latter to 2, so
//! [`Error::is_validation`] is part of the public contract.

use thiserror::Error;

/// Everything that can go wrong in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// File does not start with the expected magic tag.
    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: String, expected: String },

    /// Payload length disagrees with the shape in the header.
    #[error("{path}: payload holds {got} values but header shape {shape:?} needs {want}")]
    PayloadSize {
        path: String,
        shape: [usize; 3],
        got: usize,
        want: usize,
    },

    /// A voxel payload contained NaN or infinity.
    #[error("{path}: non-finite voxel at flat index {index}")]
    NonFinitePayload { path: String, index: usize },

    /// A voxel payload contained a negative value; volumes store activities.
    #[error("{path}: negative voxel at flat index {index}")]
    NegativePayload { path: String, index: usize },

    /// Header metadata was not valid UTF-8 / JSON.
    #[error("{path}: bad metadata block: {reason}")]
    BadMetadata { path: String, reason: String },

    /// Volume or slice shapes that must agree do not.
    #[error("shape mismatch: {context}: {a:?} vs {b:?}")]
    ShapeMismatch {
        context: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },

    /// Normalization of a constant (or empty) volume is undefined.
    #[error("degenerate intensity range [{min}, {max}]: cannot normalize")]
    DegenerateRange { min: f64, max: f64 },

    /// A parameter failed its documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A phantom structure would not fit inside the volume.
    #[error("tumor {index} at {center:?} radius {radius} leaves the head support")]
    TumorOutOfBounds {
        index: usize,
        center: [f64; 3],
        radius: f64,
    },

    /// Edge-set distance against an empty point set is undefined.
    #[error("empty edge set: {side}")]
    EmptyEdgeSet { side: &'static str },

    /// Config file could not be parsed or failed cross-field validation.
    #[error("config: {0}")]
    Config(String),

    /// Checkpoint file malformed or incompatible with the requested model.
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },

    /// A dataset index entry's content hash no longer matches the file.
    #[error("dataset entry {path}: content hash mismatch")]
    HashMismatch { path: String },

    /// A loss became non-finite during training; state dumped for inspection.
    #[error("training diverged at epoch {epoch}, step {step}: {term} is not finite")]
    Divergence {
        epoch: usize,
        step: usize,
        term: &'static str,
    },

    /// Underlying I/O failure.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by invalid inputs rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Divergence { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
