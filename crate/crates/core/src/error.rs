use thiserror::Error;

use crate::data::DataError;
use crate::diffmath::DiffError;
use crate::eval::EvalError;
use crate::layers::LayerError;
use crate::model::ModelError;
use crate::textprep::TextError;
use crate::train::TrainError;

/// Process exit status for configuration problems.
pub const EXIT_CONFIG: i32 = 2;
/// Process exit status for unreadable or inconsistent data.
pub const EXIT_DATA: i32 = 3;
/// Process exit status when training hits a non-finite value.
pub const EXIT_NUMERIC: i32 = 4;

/// Any failure surfaced by the command-line tool.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => EXIT_CONFIG,
            Error::Data(DataError::Config(_)) => EXIT_CONFIG,
            Error::Data(_) | Error::Io { .. } | Error::Text(_) => EXIT_DATA,
            Error::Model(m) => model_code(m),
            Error::Train(t) => match t {
                TrainError::Config(_) => EXIT_CONFIG,
                TrainError::NumericAbort { .. } | TrainError::NonFiniteGradient { .. } => EXIT_NUMERIC,
                TrainError::EmptyDataset => EXIT_DATA,
                TrainError::Model(m) => model_code(m),
                TrainError::Eval(e) => eval_code(e),
                TrainError::Callback(_) => EXIT_DATA,
            },
            Error::Eval(e) => eval_code(e),
            Error::Layer(LayerError::Config(_)) => EXIT_CONFIG,
            Error::Layer(LayerError::Diff(DiffError::NonFinite { .. })) => EXIT_NUMERIC,
            Error::Layer(_) => EXIT_DATA,
            Error::Diff(DiffError::NonFinite { .. }) => EXIT_NUMERIC,
            Error::Diff(_) => EXIT_DATA,
        }
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Config(_) | ModelError::ConfigMismatch(_) => EXIT_CONFIG,
        _ if e.non_finite_op().is_some() => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn eval_code(e: &EvalError) -> i32 {
    match e {
        EvalError::Model(m) => model_code(m),
        EvalError::Diff(DiffError::NonFinite { .. }) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}
