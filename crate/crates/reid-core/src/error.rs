//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row {0} has L2 norm below 1e-12 and cannot be normalized")]
    ZeroRow(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("matrix contains a non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("PK sampling needs {required} distinct identities, only {available} available")]
    InsufficientIdentities { required: usize, available: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("no center registered for class {0}")]
    MissingCenter(usize),
    #[error("anchor {0} has no positive in the batch")]
    NoPositive(usize),
    #[error("row {row} is not L2-normalized (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("sample {0} is not assigned to any bank cluster")]
    UnassignedSample(usize),
    #[error("sample {0} has no positive camera proxy")]
    NoPositiveProxy(usize),
    #[error("top-K fraction {0} outside (0, 1]")]
    FractionOutOfRange(f64),
    #[error("refinement weight alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("silhouette needs at least two clusters")]
    FewerThanTwoClusters,
    #[error("assignment contains no clusters")]
    NoClusters,
    #[error("cluster id {id} out of range for bank of {clusters} clusters")]
    ClusterOutOfRange { id: usize, clusters: usize },
    #[error("no proxy stored for cluster {cluster}, camera {camera}")]
    UnknownProxy { cluster: usize, camera: u32 },
    #[error("gallery is empty after protocol filtering")]
    EmptyGallery,
    #[error("relevance list has no relevant item")]
    NoRelevant,
    #[error("no query has a valid relevant gallery item")]
    NoEvaluableQueries,
    #[error("k-reciprocal encoding needs at least {required} samples, got {got}")]
    InsufficientSamples { required: usize, got: usize },
    #[error("clustering produced zero clusters")]
    EmptyClustering,
    #[error("bad magic bytes at offset {offset}: expected \"REID\"")]
    BadMagic { offset: u64 },
    #[error("unsupported embedding file version {0}")]
    VersionUnsupported(u32),
    #[error("file truncated at byte offset {offset}: {what}")]
    TruncatedFile { offset: u64, what: String },
    #[error("malformed CSV at line {line}: {what}")]
    BadCsv { line: usize, what: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
