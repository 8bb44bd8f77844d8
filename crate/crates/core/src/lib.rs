pub mod attention;
mod codec;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod network;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
