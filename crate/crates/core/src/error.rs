use thiserror::Error;

use crate::solver::SolutionPath;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: &'static str,
    },

    #[error("node {node} is not on the grid (grid has {len} nodes)")]
    OffGrid { node: usize, len: usize },

    #[error("grids differ: {0}")]
    GridMismatch(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("exponent condition violated: 3*gamma1 + gamma = {value:.4} must exceed 1")]
    ExponentCondition { value: f64 },

    #[error("circulant embedding is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NonPsdEmbedding { min_eigenvalue: f64 },

    #[error("step limit of {max_steps} exceeded at t = {t}")]
    StepLimit {
        max_steps: usize,
        t: f64,
        partial: Box<SolutionPath>,
    },

    #[error("state became non-finite or exceeded the blow-up cap at t = {t}")]
    BlowUp { t: f64, partial: Box<SolutionPath> },

    #[error("oracle evaluation failed: {0}")]
    Oracle(String),

    #[error("step inversion did not converge at t = {t} (residual {residual:e})")]
    InversionFailed { t: f64, residual: f64 },

    #[error("ill-conditioned inverse: |psi| * |psi_inv| = {product:e}")]
    Conditioning { product: f64 },

    #[error("radius below resolution: smallest bracket {lo} already fails")]
    RadiusBelowResolution { lo: f64 },

    #[error("spec error: {0}")]
    Spec(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that come from the numerics rather than from input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::StepLimit { .. }
                | Error::BlowUp { .. }
                | Error::NonPsdEmbedding { .. }
                | Error::InversionFailed { .. }
                | Error::Conditioning { .. }
                | Error::RadiusBelowResolution { .. }
                | Error::Oracle(_)
        )
    }
}
