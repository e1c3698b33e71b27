pub mod error;
pub mod losses;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
pub mod bwfpn;
pub mod cli;
pub mod config;
pub mod dahead;
pub mod experiment;
pub mod detector;
pub mod nn;
pub mod verify;
