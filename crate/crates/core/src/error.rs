use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the simulation and training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("layout infeasible: windows {first:?} and {second:?} overlap")]
    LayoutInfeasible {
        first: (usize, usize),
        second: (usize, usize),
    },
    #[error("window {window:?} leaves the mask aperture")]
    OutOfAperture { window: (usize, usize) },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sampling violates the angular-spectrum band limit: need a grid of at least {required} samples per axis (limit {limit})")]
    Aliasing { required: usize, limit: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    TrainingFailure {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("gradient check inconclusive: {0}")]
    Inconclusive(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated data: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },
    #[error("inconsistent data: {0}")]
    Consistency(String),
    #[error("probe plan leaves {} weights unmeasured, first {:?}", .missing.len(), .missing.first())]
    Coverage { missing: Vec<(usize, usize)> },
    #[error("calibration infeasible: {0}")]
    InfeasibleCalibration(String),
    #[error("division guard: usable weight ({0}, {1}) has zero measured gain")]
    DivisionGuard(usize, usize),
    #[error("invalid energy model: {0}")]
    InvalidModel(String),
    #[error("resource limit: {0}")]
    Resource(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
