//! Velocity completion for event-time soccer snapshots.
//!
//! Event data carries ball and player positions only at the instants where
//! on-ball actions happen, so player velocities are missing. This crate
//! completes them: a rule-based baseline plus a family of learned models
//! (MLP, VAE, GNN, RNN and their graph/recurrent/variational combinations),
//! trained and evaluated on synthetic matches, and a pitch-control layer
//! (PPCF / off-ball scoring opportunity grids) that consumes the completed
//! velocities.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod ingest;
pub mod models;
pub mod pipeline;
pub mod pitch_control;
pub mod synth;
pub mod training;
pub mod types;

pub use error::{Error, Result};
