//! Polyak-Ruppert averaged linear stochastic approximation with an online
//! multiplier bootstrap, plus TD(0) on Garnet MDPs as the worked example.

pub mod bootstrap;
pub mod error;
pub mod garnet;
pub mod lsa;
pub mod numkit;
pub mod stability;

pub use error::{Error, Result};
pub use lsa::{LsaProblem, Observation, StepSchedule};
pub use numkit::RngStream;
