pub mod error;
pub mod numgraph;

pub use error::{Error, Result};
pub mod encoders;
pub mod params;
pub mod interaction;
pub mod style;
pub mod model;
pub mod outfit;
pub mod data;
pub mod eval;
pub mod train;
pub mod checkpoint;
pub mod cli;
