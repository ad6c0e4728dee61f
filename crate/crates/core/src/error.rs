use std::path::PathBuf;

/// Errors raised by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("no valid ground truth")]
    NoValidGroundTruth,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss ({value}) at epoch {epoch}, sample {sample}")]
    NonFiniteLoss { epoch: usize, sample: usize, value: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("input geometry mismatch: {0}")]
    Geometry(String),

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version { path: String, found: u16, expected: u16 },

    #[error("truncated file {0}")]
    Truncated(String),

    #[error("config field `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn in_layer(self, layer: &str) -> Self {
        Error::Layer { layer: layer.to_string(), source: Box::new(self) }
    }

    pub(crate) fn config(field: &str, detail: impl Into<String>) -> Self {
        Error::Config { field: field.to_string(), detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
