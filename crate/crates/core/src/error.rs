use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: {detail}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        detail: String,
    },
    #[error("{op}: output extent along {dim} is not positive")]
    EmptyOutput { op: &'static str, dim: &'static str },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph was already consumed by a backward pass")]
    GraphConsumed,
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
    #[error("placement {placement} is not available for {depth} blocks")]
    InvalidPlacement {
        placement: &'static str,
        depth: &'static str,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("function is not deterministic: {0}")]
    NonDeterministic(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: &'static str, detail: String) -> Self {
        Error::ShapeMismatch { op, dim, detail }
    }
}
