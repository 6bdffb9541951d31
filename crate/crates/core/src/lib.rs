pub mod checkpoint;
pub mod corpus;
pub mod docgraph;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;
pub mod synthetic;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
