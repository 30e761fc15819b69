use thiserror::Error;

/// Errors raised by the population, model and training code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-uniform grid, sim {sim}: step {index} deviates from dt")]
    NonUniformGrid { sim: u64, index: usize },

    #[error("unknown shell index {shell} (grid has {n_shells} shells)")]
    UnknownShell { shell: usize, n_shells: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("altitude {altitude} km outside grid [{bottom}, {top}] km")]
    AltitudeOutOfRange { altitude: f64, bottom: f64, top: f64 },

    #[error("group size {group_size} does not divide {count} members (remainder {remainder})")]
    GroupSize {
        count: usize,
        group_size: usize,
        remainder: usize,
    },

    #[error("rank-deficient library: column {column} ({name}) is linearly dependent")]
    RankDeficient { column: usize, name: String },

    #[error("over-sparsified dimension {0}")]
    OverSparsified(usize),

    #[error("state diverged at t = {time} years")]
    Divergence { time: f64 },

    #[error("non-finite value at row {0}")]
    NonFinite(usize),

    #[error("non-finite activation at timestep {0}")]
    NonFiniteActivation(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics (divergence, over-sparsification)
    /// rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::OverSparsified(_)
                | Error::RankDeficient { .. }
                | Error::NonFiniteActivation(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
