//! Context-conditioned latent world models with meta-state and meta-value
//! regularization, a synthetic multi-scenario control family to train them
//! on, and exact checks of the accompanying generalization bounds.

pub mod distributions;
pub mod error;
pub mod meta_env;
pub mod numerics;
pub mod pipeline;
pub mod theory;
pub mod value_learning;
pub mod world_model;

pub use error::{Error, Result};
