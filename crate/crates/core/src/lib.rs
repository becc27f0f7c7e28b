pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod landmarks;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod netcheck;
pub mod nets;
pub mod optim;
pub mod params;
pub mod spade;
pub mod trainer;

pub use error::{Error, Result};
