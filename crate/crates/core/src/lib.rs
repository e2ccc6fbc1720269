pub mod cli;
pub mod crossover;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod netcore;
pub mod syndata;
pub mod tracker;
pub mod viseval;

pub use error::{Error, Result};
