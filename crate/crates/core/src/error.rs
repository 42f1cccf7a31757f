use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DreamError>;

#[derive(Debug, Error)]
pub enum DreamError {
    #[error("shape error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DreamError {
    pub fn input(msg: impl Into<String>) -> Self {
        DreamError::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        DreamError::Config(msg.into())
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        DreamError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
