use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at layer `{layer}`: expected {expected}, found {found}")]
    Shape {
        layer: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("architecture mismatch at layer `{0}`")]
    ArchitectureMismatch(String),

    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("inconsistent transfer log for vehicles {vehicles:?}")]
    InconsistentOutcomes { vehicles: Vec<usize> },

    #[error("round {round}: {source}")]
    Round { round: usize, source: Box<Error> },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Wrap an error with the round it occurred in.
    pub fn in_round(self, round: usize) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            e => Error::Round {
                round,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, stripped of round context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Round { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self.root(), Error::Divergence { .. })
    }
}
