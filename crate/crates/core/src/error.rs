use thiserror::Error;

/// Everything that can go wrong while evaluating models, integrating flows,
/// shooting segments or searching for orbits.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("Newton iteration did not converge: {0}")]
    NonConvergence(String),
    #[error("no clamp radius keeps the model convex (tried up to {radius})")]
    ClampTooTight { radius: f64 },
    #[error("integrator step size underflow at t = {t}")]
    StepFailure { t: f64 },
    #[error("energy drift {drift:e} exceeds tolerance {tolerance:e}")]
    EnergyDriftExceeded { drift: f64, tolerance: f64 },
    #[error("loop is not critical: gradient norm {gradient_norm:e} > {tolerance:e}")]
    NotCritical { gradient_norm: f64, tolerance: f64 },
    #[error("iteration did not converge: {0}")]
    NoConvergence(String),
    #[error("degenerate boundary problem (smallest singular value ratio {ratio:e})")]
    Degenerate { ratio: f64 },
    #[error("energy {k} is not above E(q,0) = {e_rest} at an endpoint")]
    BelowE0 { k: f64, e_rest: f64 },
    #[error("no injectivity scale passed certification above the floor")]
    ScaleNotFound,
    #[error("segment time collapsed to the floor {floor:e}")]
    PeriodCollapse { floor: f64 },
    #[error("segment {index} failed: {reason}")]
    SegmentFailure { index: usize, reason: String },
    #[error("no orbit found: {0}")]
    NotFound(String),
    #[error("minimax path budget exceeded after {sweeps} sweeps")]
    PathBudgetExceeded { sweeps: usize },
    #[error("phase point leaves the polydisk where the clamp profile is the identity")]
    LeavesPolydisk,
}

pub type Result<T> = std::result::Result<T, Error>;
