use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // robot description
    #[error("malformed URDF: {0}")]
    MalformedXml(String),
    #[error("joint `{joint}` references undefined link `{link}`")]
    UnknownLinkRef { joint: String, link: String },
    #[error("kinematic graph is not a tree: {0}")]
    CycleDetected(String),
    #[error("joint `{joint}` has unsupported type `{kind}`")]
    UnsupportedJointKind { joint: String, kind: String },
    #[error("robot has no visual geometry")]
    NoGeometry,

    // kinematics and deformation
    #[error("pose has {got} values, robot has {expected} degrees of freedom")]
    PoseLengthMismatch { expected: usize, got: usize },
    #[error("kinematics result was computed without a gradient tape")]
    NoTape,
    #[error("model and kinematics disagree: {0}")]
    PoseMismatch(String),

    // splats and rendering
    #[error("every Gaussian was pruned")]
    EmptyAfterPrune,
    #[error("render state no longer matches its inputs")]
    StaleAux,

    // optimisation
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in parameter group `{0}`")]
    NonFiniteGradient(String),
    #[error("optimisation diverged: loss became {0}")]
    DivergedNonFinite(f64),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("point set is empty")]
    EmptySet,
    #[error("index {index} out of range for {len} Gaussians")]
    IndexOutOfRange { index: usize, len: usize },

    // external scorer bridge
    #[error("bridge protocol violation: {0}")]
    BridgeProtocolError(String),
    #[error("bridge closed by peer")]
    BridgeClosed,

    // files
    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("I/O error on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
