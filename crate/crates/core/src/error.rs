use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix region is disconnected on the torus ({components} components)")]
    DisconnectedMatrix { components: usize },

    #[error("matrix region is empty; the corrector system is singular")]
    EmptyMatrix,

    #[error("mask is not 4-connected")]
    DisconnectedMask,

    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("conjugate gradients did not converge after {iterations} iterations (relative residual {residual:e})")]
    CgNotConverged {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error(
        "eigensolver did not converge after {iterations} iterations (worst residual {worst:e})"
    )]
    EigenNotConverged {
        iterations: usize,
        worst: f64,
        /// Ritz values at the last iteration.
        values: Vec<f64>,
        residuals: Vec<f64>,
    },

    #[error("time step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("effective matrix is not positive definite (eigenvalues {eigenvalues:?})")]
    ThetaNotPositiveDefinite { eigenvalues: [f64; 2] },

    #[error("lambda = {lambda} is within {distance:e} of the pole {pole}")]
    PoleProximity {
        lambda: f64,
        pole: f64,
        distance: f64,
    },

    #[error("bisection bracket failure on ({lo}, {hi})")]
    BracketFailure { lo: f64, hi: f64 },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps an error with the pipeline stage it came from.
    pub fn at_stage(self, stage: impl Into<String>) -> Error {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
