//! Spike-and-slab lasso biclustering, optionally guided by a categorical
//! outcome through a multinomial-logistic regression on the sample
//! memberships.

pub mod cli;
pub mod em;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod outcome;
pub mod rng;
pub mod simulation;
pub mod soul;

pub use error::{Error, Result};
