//! Unsupervised domain adaptation from labeled RGB frames to unlabeled
//! event-camera recordings.

pub mod cli;
pub mod datasets;
pub mod eval;
pub mod error;
pub mod event_core;
pub mod frame_core;
pub mod grid;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
