//! Multi-task imitation learning with bimodal task conditioning.
//!
//! A policy for tabletop pick-and-place is conditioned on both a
//! demonstration embedding and a language embedding of the task. The crate
//! contains the task grid, a kinematic simulator, a scripted expert, the
//! buffer format, encoders, the FiLM-conditioned policy, the training loop
//! and the evaluation protocol.

pub mod checkpoint;
pub mod datasets;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod expert;
pub mod nn;
pub mod ops;
pub mod policy;
pub mod render;
pub mod seeds;
pub mod simenv;
pub mod taskspace;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
