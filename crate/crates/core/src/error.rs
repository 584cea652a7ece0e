use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("no rows")]
    NoRows,

    #[error("no samples")]
    NoSamples,

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("zero standard deviation for feature `{0}`")]
    ZeroStd(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported encoder: {0}")]
    UnsupportedEncoder(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Divergence { epoch: usize, msg: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI, one per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Parse { .. } | Error::NoRows | Error::Json(_) => 4,
            Error::Validation(_) | Error::NoSamples | Error::ZeroStd(_) => 5,
            Error::Config(_) => 2,
            Error::Checkpoint(_) | Error::UnsupportedEncoder(_) => 6,
            Error::Divergence { .. } => 7,
            Error::Image(_) => 8,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

/// Config error for an unrecognised choice, naming the closest option.
pub fn unknown_choice(what: &str, input: &str, options: &[&str]) -> Error {
    let best = options
        .iter()
        .max_by(|a, b| strsim::jaro_winkler(input, a).total_cmp(&strsim::jaro_winkler(input, b)));
    match best {
        Some(best) => Error::Config(format!("unknown {what} `{input}`; did you mean `{best}`?")),
        None => Error::Config(format!("unknown {what} `{input}`")),
    }
}
