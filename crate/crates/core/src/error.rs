use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every stage of the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("input contains no points")]
    EmptyInput,

    #[error("all points coincide; normalization scale is zero")]
    ZeroScale,

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),

    #[error("degenerate gradient at {0:?}")]
    DegenerateGradient([f64; 3]),

    #[error("autodiff contract violated: {0}")]
    Autodiff(String),

    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("loss component {component} is not finite at iteration {iteration}")]
    NonFiniteLoss {
        component: &'static str,
        iteration: u64,
    },

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: u64, loss: f64 },

    #[error("extracted level set is empty")]
    EmptyLevelSet,

    #[error("{degenerate} of {total} points have a vanishing field gradient")]
    NormalQuality { degenerate: usize, total: usize },

    #[error("no support for MLS evaluation at {0:?}")]
    NoSupport([f64; 3]),

    #[error("reconstruction grid has no valid samples")]
    EmptyReconstruction,

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
