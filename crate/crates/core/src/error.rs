use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("array has {got} values, grid expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("derivative order {0} is not supported (use 1 or 2)")]
    InvalidOrder(u8),
    #[error("fine grid {fine:?} is not an integer refinement of {coarse:?}")]
    NotARefinement { fine: (usize, usize, usize), coarse: (usize, usize, usize) },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("phantom mask touches the boundary at node ({0}, {1})")]
    MaskTouchesBoundary(usize, usize),
    #[error("linear solve failed at time step {step}: {reason}")]
    LinearSolve { step: usize, reason: String },
    #[error("density floor violated: min |m| = {min:e} < {floor:e} at node ({i}, {j}, {k})")]
    DensityFloor { min: f64, floor: f64, i: usize, j: usize, k: usize },
    #[error("gradient floor violated: |grad u0|^2 = {value:e} < {floor:e} at node ({i}, {j})")]
    GradientFloor { value: f64, floor: f64, i: usize, j: usize },
    #[error("spline needs at least 4 samples, got {0}")]
    TooFewSamples(usize),
    #[error("missing boundary traces: {0}")]
    MissingTraces(String),
    #[error("optimizer aborted at iteration {iteration}: {reason}")]
    Optimizer { iteration: usize, reason: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code, printed by the command-line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidGrid(_) => "E_GRID",
            Error::ShapeMismatch { .. } => "E_SHAPE",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::InvalidOrder(_) => "E_ORDER",
            Error::NotARefinement { .. } => "E_REFINE",
            Error::InvalidConfig(_) => "E_CONFIG",
            Error::MaskTouchesBoundary(..) => "E_MASK",
            Error::LinearSolve { .. } => "E_SOLVE",
            Error::DensityFloor { .. } => "E_DENSITY",
            Error::GradientFloor { .. } => "E_GRADFLOOR",
            Error::TooFewSamples(_) => "E_SPLINE",
            Error::MissingTraces(_) => "E_TRACES",
            Error::Optimizer { .. } => "E_OPTIM",
            Error::Dataset(_) => "E_DATASET",
            Error::Io(_) => "E_IO",
        }
    }
}
