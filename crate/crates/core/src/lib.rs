pub mod cli;
pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
