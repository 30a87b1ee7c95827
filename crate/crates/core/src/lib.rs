pub mod captioner;
pub mod ecs;
pub mod error;
pub mod evalkit;
pub mod harness;
pub mod localizer;
pub mod optim;
pub mod posenc;
pub mod setpred;
pub mod temporal;

pub use error::{Error, Result};
