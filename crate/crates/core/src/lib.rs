//! Simulation, estimation and learning for phase-only uplink positioning
//! with distributed antenna points.

mod error;

pub mod channel;
pub mod dataset;
pub mod eval;
pub mod mle;
pub mod models;
pub mod scenario;

pub use error::{CoreError, Result};
