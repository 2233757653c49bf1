//! Cross-platform item recommendation: papers and code repositories embedded
//! into one vector space by two graph convolution towers trained with a
//! constrained WARP ranking objective.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod gcn;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod plot;
pub mod sampler;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
