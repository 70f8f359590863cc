use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // corpus
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest at {location}: {message}")]
    MalformedManifest { location: String, message: String },
    #[error("duplicate sample (domain {domain_id}, instance {instance_id})")]
    DuplicateSample { domain_id: usize, instance_id: usize },
    #[error("sample references unknown domain id {0}")]
    UnknownDomainId(usize),
    #[error("image has no pixels")]
    EmptyImage,
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannelCount(usize),
    #[error("corpus has no usable training samples")]
    EmptyCorpus,
    #[error("invalid batch size {0}")]
    InvalidBatchSize(usize),
    #[error("invalid corpus counts: {0}")]
    InvalidCounts(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec failure on {path}: {message}")]
    ImageCodec { path: PathBuf, message: String },

    // shapes and tensors
    #[error("odd channel count {0} for max-feature-map")]
    OddChannelCount(usize),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("channel mismatch: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("spatial extent {0} too small for instance statistics")]
    DegenerateSpatial(usize),
    #[error("style level {level} out of range (have {levels})")]
    LevelOutOfRange { level: usize, levels: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("too few positions for contextual similarity: {0}")]
    TooFewPositions(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    // encoders / backends
    #[error("guided backpropagation needs rectifier activations; {0} has none")]
    UnsupportedActivation(String),
    #[error("no {0} backend registered")]
    NoBackendRegistered(&'static str),
    #[error("invalid backend spec `{0}`")]
    InvalidBackend(String),
    #[error("embedding is degenerate (constant input)")]
    DegenerateEmbedding,

    // losses
    #[error("loss component `{0}` is not finite")]
    NonFiniteComponent(&'static str),
    #[error("non-finite loss at iteration {iteration}: first bad component `{component}`")]
    NonFiniteLoss { iteration: usize, component: &'static str },

    // metrics
    #[error("covariance is not positive semidefinite (eigenvalue {0:e})")]
    NonPsdBeyondTolerance(f64),
    #[error("too few samples: {0}")]
    TooFewSamples(usize),
    #[error("corpus too small for NIQE fit: {0}")]
    CorpusTooSmall(String),
    #[error("all patches rejected by the sharpness filter")]
    AllPatchesRejected,
    #[error("image {0}x{1} too small for patch size {2}")]
    ImageTooSmall(usize, usize, usize),
    #[error("matrix grid incomplete: {0}")]
    IncompleteGrid(String),
    #[error("checkpoint has no trained generator")]
    UntrainedCheckpoint,
    #[error("domain {0} has no eval samples")]
    EmptyEvalSplit(usize),

    // training
    #[error("corpus has a single domain; classification needs at least two")]
    SingleDomainCorpus,
    #[error("training diverged at iteration {0}")]
    DivergenceDetected(usize),
    #[error("checkpoint i/o failure: {0}")]
    CheckpointIoFailure(String),
    #[error("checkpoint config hash {found} does not match {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("need at least two eval snapshots, got {0}")]
    TooFewSnapshots(usize),
    #[error("snapshot iterations must be strictly increasing")]
    NonIncreasingSnapshots,
    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure { path: path.into(), source }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch { expected: format!("{expected:?}"), actual: format!("{actual:?}") }
    }
}
