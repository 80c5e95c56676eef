use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing sidecar file {0}")]
    MissingSidecar(PathBuf),

    #[error("sidecar {path}: {msg}")]
    Sidecar { path: PathBuf, msg: String },

    #[error("dimension mismatch: payload holds {actual} samples, sidecar declares {expected}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("invalid geotransform: {0}")]
    InvalidGeoTransform(String),

    #[error("terrain: {0}")]
    Terrain(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("channel {name} has zero variance on the training split")]
    ZeroVariance { name: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training: {0}")]
    Training(String),

    #[error("forest: {0}")]
    Forest(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing upstream artifact: run `{stage}` first ({detail})")]
    MissingArtifact { stage: String, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
