pub mod error;
pub mod rng;
pub mod tensorcore;
pub mod transformer;
pub mod envs;
pub mod metrics;
pub mod dtqn;
pub mod dt;
pub mod trajstore;
pub mod baselines;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
