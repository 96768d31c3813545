pub mod action_space;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod memory;
pub mod policy;
pub mod progress;
pub mod retrieval;
pub mod sim;

pub use error::{Error, Result};
