pub mod agent;
pub mod baselines;
pub mod channel;
pub mod env;
pub mod error;
pub mod harness;
pub mod ios;
pub mod neural;
pub mod transceiver;
pub mod twin;

pub use error::{Error, Result};
