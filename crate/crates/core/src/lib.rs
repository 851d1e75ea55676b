//! Co-attention visual question answering with semantic information.
//!
//! The crate holds a small reverse-mode autodiff engine, the model, data
//! handling, training, evaluation and the `vqacoin` command-line tool.

pub mod diffmath;
pub mod layers;
pub mod textprep;
pub mod attention;
pub mod model;
pub mod data;
pub mod train;
pub mod eval;
pub mod cli;
mod error;

pub use error::{Error, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC};
