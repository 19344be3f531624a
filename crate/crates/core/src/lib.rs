//! Streaming node representations for continuous-time dynamic graphs.
//!
//! Node states follow a learnable recurrence whose embedding matrix and
//! forgetting coefficients are trained online with forward-mode (RTRL)
//! gradients, while a small feedforward head is trained by backprop.

pub mod bench;
pub mod cli;
pub mod error;
pub mod gs;
pub mod head;
pub mod ingest;
pub mod metrics;
pub mod recurrent;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};
