//! Sampled-data stochastic control toolkit: sampling-interval bounds,
//! LMI certificates, state-feedback synthesis and Monte Carlo checks.

pub mod bounds;
pub mod cli;
pub mod design;
pub mod error;
pub mod lmi;
pub mod models;
pub mod numerics;
pub mod sim;

pub use error::{Error, Result};
