pub mod bridge;
pub mod cli;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod numkit;
pub mod probe;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
