//! Large deviations of random walks in random environments: exact 1D and
//! finite-chain constructions, regeneration estimators and space-time
//! Doob transforms.

pub mod env;
pub mod error;
pub mod finitechain;
pub mod quenched1d;
pub mod regen;
pub mod rng;
pub mod spacetime;
pub mod stats;
pub mod walk;

pub use error::{Error, Result};
