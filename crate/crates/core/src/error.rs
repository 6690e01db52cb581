use std::io;

use thiserror::Error;

/// Errors raised anywhere in the recognition toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("image width {width} is narrower than the {window}-pixel analysis window; right-pad the line first")]
    ImageTooNarrow { width: usize, window: usize },

    #[error("line {line_id}: {frames} frames cannot cover the {required} states of the transcript")]
    Infeasible {
        line_id: u32,
        frames: usize,
        required: usize,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("tied-state target {target} is infeasible; the feasible range is {min}..={max}")]
    TargetOutOfRange { target: usize, min: usize, max: usize },

    #[error("unknown writer {0}")]
    UnknownWriter(u32),

    #[error("bad artifact format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
