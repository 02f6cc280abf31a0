use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum FlashError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A non-finite value appeared; `layer` indexes the layer list of the model.
    #[error("numerical failure at layer {layer}: {detail}")]
    Numerical { layer: usize, detail: String },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("infeasible density target: {0}")]
    Infeasible(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, FlashError>;
