use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not a rigid transform")]
    InvalidTransform,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("{0} not positive semidefinite")]
    NotPositiveSemidefinite(String),
    #[error("{0} not positive definite")]
    NotPositiveDefinite(String),
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("time step must be positive, got {0}")]
    NonPositiveTimeStep(f64),
    #[error("singular innovation covariance")]
    SingularCovariance,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("kinematic prior requested without a joint hint")]
    MissingJointHint,
    #[error("joint model has no articulation to predict from")]
    NoArticulation,
    #[error("tangent undefined: grasp point lies on the rotation axis")]
    UndefinedTangent,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("insufficient motion for a screw fit")]
    InsufficientMotion,
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("no frames")]
    NoFrames,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
