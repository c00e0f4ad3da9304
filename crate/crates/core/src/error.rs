use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("could not draw a layer with condition number <= {limit} after {attempts} attempts")]
    ConditionLimit { limit: f64, attempts: usize },

    #[error("power iteration did not converge within {iters} iterations")]
    PowerIteration { iters: usize },

    #[error("training diverged at epoch {epoch} (loss {loss}): {terms}")]
    Divergence {
        epoch: usize,
        loss: f64,
        terms: String,
    },

    #[error("non-finite loss at epoch {epoch}: {terms}")]
    NonFiniteLoss { epoch: usize, terms: String },

    #[error("adaptation aborted at step {step}: entropy rose for 10 consecutive steps (now {entropy})")]
    AdaptationCollapse { step: usize, entropy: f64 },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
