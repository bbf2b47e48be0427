//! Anomaly augmentation with a latent-space RL agent and a sparse mixture of
//! selective state-space experts.

pub mod agent;
pub mod dataset;
pub mod density;
pub mod detector;
pub mod diffcore;
pub mod error;
pub mod generator;
pub mod harness;
pub mod mome;
pub mod rng;
pub mod selfloop;
pub mod train;

pub use error::{Error, Result};
