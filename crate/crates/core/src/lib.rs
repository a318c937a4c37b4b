pub mod error;
pub mod flowpath;
pub mod harness;
pub mod masking;
pub mod metrics;
pub mod sampler;
pub mod spectral;
pub mod tasks;
pub mod training;
pub mod vectorfield;

pub use error::{Error, Result};
