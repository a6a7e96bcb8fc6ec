pub mod attention;
pub mod data;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod predictor;
pub mod schedule;

pub use error::{Error, Result};
