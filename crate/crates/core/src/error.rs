use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("invalid material: {0}")]
    Material(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The coefficient in front of the second time derivative came too close to zero.
    #[error("degeneracy at t = {time:.6}: margin {margin:.6e} <= floor {floor}")]
    Degeneracy { time: f64, margin: f64, floor: f64 },

    #[error("newton failed at t = {time:.6} after {iterations} iterations (scaled residual {residual:.3e})")]
    NewtonFailure {
        time: f64,
        iterations: usize,
        residual: f64,
    },

    #[error("linear solver: {0}")]
    LinearSolve(String),

    #[error("iteration did not converge: {0}")]
    NoConvergence(String),

    #[error("model kind mismatch: {0}")]
    KindMismatch(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach a time stamp to degeneracy / Newton errors raised without one.
    pub fn at_time(self, t: f64) -> Self {
        match self {
            Error::Degeneracy { margin, floor, .. } => Error::Degeneracy {
                time: t,
                margin,
                floor,
            },
            Error::NewtonFailure {
                iterations,
                residual,
                ..
            } => Error::NewtonFailure {
                time: t,
                iterations,
                residual,
            },
            other => other,
        }
    }
}

/// Process exit codes used by the command-line runner.
pub mod exit_code {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DEGENERACY: i32 = 3;
    pub const SOLVER: i32 = 4;
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => exit_code::IO,
            Error::Degeneracy { .. } => exit_code::DEGENERACY,
            Error::NewtonFailure { .. } | Error::LinearSolve(_) | Error::NoConvergence(_) => exit_code::SOLVER,
            Error::Mesh(_) | Error::Material(_) | Error::InvalidArgument(_) | Error::KindMismatch(_) | Error::Config(_) => {
                exit_code::CONFIG
            }
        }
    }
}
