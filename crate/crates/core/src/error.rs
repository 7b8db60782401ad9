use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("LoRA adapter mismatch at layer {layer}, route {route}: {detail}")]
    Adapter {
        layer: usize,
        route: &'static str,
        detail: String,
    },

    #[error("token out of range: {0}")]
    Token(String),

    #[error("malformed token stream: {0}")]
    Layout(String),

    #[error("caption grammar: {0}")]
    Caption(String),

    #[error("learning-rate step {step} outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("loss became non-finite at step {step} (last good checkpoint: {last_good})")]
    Diverged { step: usize, last_good: String },

    #[error("missing stage-1 checkpoint for the {branch} branch: {}", path.display())]
    MissingBranch { branch: &'static str, path: PathBuf },

    #[error("stage-1 checkpoints disagree outside their trainable groups: {0}")]
    MergeConflict(String),

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: truncated file ({0})")]
    Truncated(String),

    #[error("checkpoint: checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum { stored: u64, computed: u64 },

    #[error("checkpoint: {0}")]
    Malformed(String),

    #[error("run config: {0}")]
    RunConfig(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("benchmark: {0}")]
    Bench(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn in_layer(self, layer: usize) -> Self {
        Error::Layer {
            layer,
            source: Box::new(self),
        }
    }
}
