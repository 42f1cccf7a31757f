//! DreamNet: multilabel emotion and theme classification of dream
//! narratives, optionally fused with REM-stage EEG band powers.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eeg;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{DreamError, Result};
