pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod defenses;
pub mod detection;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod math;
pub mod recovery;
pub mod rng;
pub mod service;

pub use error::{Error, Result};
