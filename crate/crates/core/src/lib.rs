pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod editsim;
pub mod error;
pub mod evalgame;
pub mod extract;
pub mod imaging;
pub mod nn;
pub mod riw;

pub use error::{Error, Result};
