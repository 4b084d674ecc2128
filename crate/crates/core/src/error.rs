use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid problem definition: {0}")]
    InvalidSpec(String),

    /// The model is evaluated outside the region where it is defined
    /// (e.g. pitch at ±π/2 for the Euler-rate map).
    #[error("model validity violated: {0}")]
    ModelValidity(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("linearization point outside the box at stage {stage}, component {index}")]
    InfeasiblePoint { stage: usize, index: usize },

    #[error("factorization failed at stage {stage} (smallest pivot {pivot:e})")]
    Factorization { stage: usize, pivot: f64 },

    #[error("LQR Riccati iteration did not converge after {0} iterations")]
    RiccatiDivergence(usize),

    #[error("weight file field `{field}`: expected shape {expected}, got {got}")]
    ShapeMismatch {
        field: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid controller id `{id}`: {reason}")]
    ControllerId { id: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
