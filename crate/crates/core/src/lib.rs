pub mod baselines;
pub mod error;
pub mod feedback;
pub mod frame;
pub mod mdp;
pub mod geometry;
pub mod harness;
pub mod learning;
pub mod mobility;
pub mod pomdp;
pub mod scenario;

pub use error::{Error, Result};
