//! Mixed-autonomy highway simulation in which robot cars steer modeled human
//! drivers toward target behaviors through control-barrier-function
//! constraints on a per-step quadratic program.

pub mod behavior;
pub mod cbf;
pub mod config;
pub mod error;
pub mod qp;
pub mod sim;
pub mod studies;
pub mod world;

pub use error::{Error, Result};
