use std::fmt;

use thiserror::Error;

/// Which occlusion variant was being captioned when an adapter failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcclusionVariant {
    Blur,
    BlackFill,
    Inpaint,
}

impl fmt::Display for OcclusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Blur => "blur",
            Self::BlackFill => "black-fill",
            Self::Inpaint => "inpaint",
        })
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),

    #[error("transform guideline violated: {0}")]
    Guideline(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("lexicon error: {0}")]
    Lexicon(String),

    /// Transport failure, timeout or malformed response from an external model.
    /// `payload` carries the raw response when one was received.
    #[error("{role} adapter: {message}")]
    Adapter {
        role: &'static str,
        message: String,
        payload: Option<String>,
    },

    #[error("occlusion variant {variant} failed: {source}")]
    Occlusion {
        variant: OcclusionVariant,
        #[source]
        source: Box<Error>,
    },

    #[error("missing run artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),

    #[error("labels reference unknown mp ids: {}", .0.join(", "))]
    UnknownMpIds(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn adapter(role: &'static str, message: impl Into<String>) -> Self {
        Self::Adapter {
            role,
            message: message.into(),
            payload: None,
        }
    }

    pub(crate) fn adapter_payload(
        role: &'static str,
        message: impl Into<String>,
        payload: impl Into<String>,
    ) -> Self {
        Self::Adapter {
            role,
            message: message.into(),
            payload: Some(payload.into()),
        }
    }

    /// True for failures that originate in an external model endpoint.
    pub fn is_adapter_failure(&self) -> bool {
        matches!(self, Self::Adapter { .. } | Self::Occlusion { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
