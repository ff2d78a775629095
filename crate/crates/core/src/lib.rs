pub mod audio;
pub mod baseline_nets;
pub mod checkpoint;
pub mod corpus;
pub mod envelope;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod seed;
pub mod sylnet;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
