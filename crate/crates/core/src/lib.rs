pub mod autograd;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval_harness;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod spatial_alignment;
pub mod synthetic;
pub mod temporal_consistency;
pub mod trainer;

pub use error::{Error, Result};
