use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("Riccati iteration did not converge after {iterations} iterations (residual history {history:?})")]
    RiccatiNonConvergence {
        iterations: usize,
        history: Vec<f64>,
    },

    #[error("line search stagnated at iteration {iteration}: J = {j}, |[C,M]| = {commutator_norm}, last trial step {step}")]
    Stagnation {
        iteration: usize,
        j: f64,
        commutator_norm: f64,
        step: f64,
    },

    #[error("descent sign flipped from {previous} to {current} at iteration {iteration}")]
    SignFlip {
        iteration: usize,
        previous: i8,
        current: i8,
    },

    #[error("no eigen-subspace of M matches the projector (principal angles {angles:?})")]
    Classification { angles: Vec<f64> },

    #[error("continuation failed at gamma = {gamma}: {reason}")]
    Continuation { gamma: f64, reason: String },

    #[error("M0 has nearly repeated eigenvalues (minimum gap {gap:e}); resample Q or L")]
    Degenerate { gap: f64 },

    #[error("simulation blew up at step {step} (state norm {norm:e}); reduce dt")]
    Instability { step: usize, norm: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Whether the error stems from bad user input rather than a numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::Input(_)
                | Error::Config(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
