pub mod datasets;
pub mod degradation;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod federation;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod toy;

pub use error::{Error, ErrorClass, Result};
