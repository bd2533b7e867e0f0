pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
mod error;
pub mod geometry;
pub mod losses;
pub mod meta;
pub mod nets;
pub mod optim;
pub mod sdfdata;
pub mod seeds;

pub use error::{Error, Result};
