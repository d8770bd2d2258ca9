use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("supercritical tilt r = {r}: {detail}")]
    Supercritical { r: f64, detail: String },
    #[error("non-elliptic environment: {0}")]
    NonElliptic(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("kernel is not ballistic: {0}")]
    NotBallistic(String),
    #[error("no convergence: {0}")]
    NonConvergent(String),
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),
    #[error("starved: found {found} slabs, requested {requested}")]
    Starved { found: usize, requested: usize },
    #[error("theta outside the cone of finite exponential moments: {0}")]
    OutsideCone(String),
    #[error("newton iteration left the estimated cone: {0}")]
    OutOfCone(String),
    #[error("outside the domain: {0}")]
    OutOfDomain(String),
    #[error("profile law does not have finite support")]
    NonFiniteSupport,
    #[error("truncated lattice leaked mass {leaked:e}")]
    TruncationLeak { leaked: f64 },
    #[error("event too rare: acceptance {acceptance:e}")]
    TooRare { acceptance: f64 },
}
