pub mod bench;
pub mod bo;
pub mod cli;
pub mod data;
pub mod diffmath;
pub mod encoder;
pub mod error;
pub mod gp;
pub mod io;
pub mod surrogate;
pub mod transfer;

pub use error::{Error, Result};
