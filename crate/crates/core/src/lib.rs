pub mod baselines;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod featurize;
pub mod harness;
pub mod kinematics;
pub mod segmentation;
pub mod stream;

pub use error::{Error, Result};
