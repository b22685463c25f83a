use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors reported by the segmentation library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode/encode failed: {0}")]
    Image(#[from] image::ImageError),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Trimap leaves no room to train one of the color models.
    #[error("degenerate trimap: {0}")]
    DegenerateTrimap(String),

    #[error("too few samples to fit a {components}-component mixture: {samples}")]
    TooFewSamples { samples: usize, components: usize },

    #[error("covariance is singular or not positive definite")]
    SingularCovariance,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
