pub mod aero;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pointcloud;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
