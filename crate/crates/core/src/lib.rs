pub mod analysis;
pub mod error;
pub mod experiment;
pub mod expert;
pub mod gating;
pub mod rng;
pub mod sim;
pub mod task_gen;
pub mod verify;

pub use error::{Error, Result};
