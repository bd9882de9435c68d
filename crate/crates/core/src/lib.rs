//! Instruction-aware context compression with a small encoder-decoder scorer.

pub mod autograd;
pub mod compress;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
