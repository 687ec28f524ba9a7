pub mod background;
pub mod critic;
pub mod error;
pub mod fusion;
pub mod masks;
pub mod metrics;
pub mod modulation;
pub mod nn;
pub mod object;
pub mod objectives;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod service;
pub mod train;

pub use error::{Error, Result};
