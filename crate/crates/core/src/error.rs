use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("malformed weight file: {0}")]
    WeightFormat(String),

    #[error("weight file ends inside layer `{0}`")]
    IncompleteLayer(String),

    #[error("layer `{0}` missing from weight file")]
    MissingLayer(String),

    #[error("layer `{tag}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        tag: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("input is {height}x{width}; the codec needs at least {min}x{min}")]
    TooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("feature has {found} channels, expected {expected}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite {term} loss{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFiniteLoss {
        term: &'static str,
        step: Option<u64>,
    },

    #[error("no images found in {}", .0.display())]
    EmptyCorpus(PathBuf),

    #[error("frames differ in resolution: {0}")]
    MixedResolution(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
