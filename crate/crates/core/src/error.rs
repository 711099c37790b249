use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("incompatible layer dimensions: layer {layer} outputs {out_dim} but next layer expects {in_dim}")]
    LayerMismatch {
        layer: usize,
        out_dim: usize,
        in_dim: usize,
    },

    #[error("layer index {index} out of range 1..={layers}")]
    LayerIndex { index: usize, layers: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("attack aborted after {completed} of {requested} iterations: non-finite gradient")]
    AttackAborted { completed: usize, requested: usize },

    #[error("head weights differ between the two networks (first mismatch in layer {0})")]
    HeadMismatch(usize),

    #[error("no frozen head: freeze layers 1..=a before finetuning the tail")]
    NoFrozenHead,

    #[error("probe for layer {0} has not been trained")]
    UntrainedProbe(usize),

    #[error("every class has fewer than {min} samples")]
    SparseClasses { min: usize },

    #[error("malformed data file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("{phase}: {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Wraps an error with the pipeline phase it happened in.
    pub fn in_phase(self, phase: impl Into<String>) -> Self {
        Error::Phase {
            phase: phase.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
