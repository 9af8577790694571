//! Simulator and schedulers for a THz VR network served by reconfigurable
//! intelligent surfaces (RIS).
//!
//! Each slot, mobile users move, LoS links block and unblock, and a controller
//! associates RIS with users. The exact scheduler maximizes a drift-plus-penalty
//! objective that trades throughput against queue-length risk; a recurrent
//! policy learns to imitate or improve on it.

pub mod channel;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod policy;
pub mod queue;
pub mod rng;
pub mod scheduler;
pub mod sim;

pub use error::{Error, Result};
