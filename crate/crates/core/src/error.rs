//! Crate-wide error type.
//!
//! Numerical failure modes are first-class values rather than panics: mesh
//! tangling, Newton stagnation and singular linear algebra all abort a run
//! with enough context to be reported in the run metadata.

use thiserror::Error;

/// Failure modes of the moving-mesh machinery.
#[derive(Debug, Error)]
pub enum Error {
    /// Two mesh nodes collided or crossed: some cell width fell below the
    /// configured floor. `index` is the cell, `delta` its (signed) width.
    #[error("mesh crossing in cell {index}: width {delta:.3e} <= floor {floor:.3e}")]
    MeshCrossing { index: usize, delta: f64, floor: f64 },

    /// Newton iteration did not reach the residual tolerance.
    #[error("Newton did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        /// Residual infinity-norm after each iteration, for post-mortems.
        history: Vec<f64>,
    },

    /// LU elimination met a pivot that is exactly or numerically zero.
    #[error("singular matrix: no usable pivot in column {column}")]
    SingularMatrix { column: usize },

    /// The bordered mass/constraint (KKT) matrix lost rank, so velocities or
    /// accelerations can no longer be recovered from momenta.
    #[error("singular KKT system: {detail}")]
    SingularKkt { detail: String },

    /// A residual or iterate picked up a NaN or infinity.
    #[error("non-finite value produced at {context}")]
    NonFinite { context: String },

    /// A time-stepping loop failed at a specific step; wraps the cause.
    #[error("step {step} (t = {t:.6}) failed: {source}")]
    StepFailed {
        step: usize,
        t: f64,
        #[source]
        source: Box<Error>,
    },

    /// Invalid run configuration (bad parameter combination, unknown scheme).
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Classify for exit-code and metadata purposes: `mesh_crossing`,
    /// `no_convergence`, `singular`, `config`, `io`.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MeshCrossing { .. } => "mesh_crossing",
            Error::NoConvergence { .. } => "no_convergence",
            Error::SingularMatrix { .. } | Error::SingularKkt { .. } | Error::NonFinite { .. } => {
                "singular"
            }
            Error::StepFailed { source, .. } => source.kind(),
            Error::Config(_) => "config",
            Error::Io(_) | Error::Json(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
