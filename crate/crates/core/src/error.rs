use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite activation in layer {layer}{}", head.map(|h| format!(", head {h}")).unwrap_or_default())]
    NonFiniteActivation { layer: usize, head: Option<usize> },

    #[error("token {0} is a special token and carries no channel value")]
    SpecialToken(u32),

    #[error("vocabulary has no channel entries")]
    EmptyVocabulary,

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    #[error("feature map mismatch: {0}")]
    FeatureMapMismatch(String),

    #[error("every scale point produced an infinite perplexity")]
    AllPerplexityInfinite,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::InvalidConfig(detail.into())
    }
}
