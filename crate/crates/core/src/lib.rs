pub mod active;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod flatconf;
pub mod metrics;
pub mod model;
pub mod pca;
pub mod rng;
pub mod strategies;

pub use error::{Error, Result};
pub use nalgebra;
