//! Malware family classification from byte images, trained with a
//! supervised loss plus a masked teacher-student embedding regressor.

pub mod analysis;
pub mod cli;
pub mod dataset;
pub mod ema;
pub mod error;
pub mod losses;
pub mod masking;
pub mod model;
pub mod optim;
pub mod preprocess;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
