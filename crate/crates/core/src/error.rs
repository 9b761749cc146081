use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate model: {0}")]
    DegenerateModel(String),
    #[error("periodic support: offsets generate {0}Z, not the full lattice")]
    PeriodicSupport(i64),
    #[error("offset {0} is not in the model support")]
    UnsupportedOffset(i64),
    #[error("annealed law has zero variance")]
    ZeroVariance,
    #[error("annealed law is not normalized (variance {0})")]
    NotNormalized(f64),
    #[error("too many particles: k = {k} exceeds the limit {max}")]
    TooManyParticles { k: usize, max: usize },
    #[error("ratio denominator vanished along the trajectory")]
    ZeroDenominator,
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("total mass {0} exceeded the blow-up guard")]
    MassBlowup(f64),
    #[error("time must be positive, got {0}")]
    NonpositiveTime(f64),
    #[error("quadrature did not converge: refinement changed the value by {0:e}")]
    QuadratureNotConverged(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("validation failed: {0:?}")]
    ValidationFailure(Vec<String>),
    #[error("estimator disagreement: {0}")]
    EstimatorDisagreement(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
