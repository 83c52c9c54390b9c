use thiserror::Error;

use crate::numerics::{GradCheckError, ShapeError};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown modality `{0}`")]
    UnknownModality(String),
    #[error("mask plan rejected: {0}")]
    Mask(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("benchmark: {0}")]
    Bench(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
