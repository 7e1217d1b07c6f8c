//! Meta-learned losses for online adaptation of a learned inverse-dynamics
//! model on a simulated planar arm.
//!
//! * [`arm`]: rigid-body dynamics, simulation and PD control.
//! * [`dataset`]: run collection, frequency splits, batching and CSV I/O.
//! * [`model`]: the inverse-dynamics network and its optimizers.
//! * [`loss`]: fixed and learnable losses.
//! * [`meta`]: meta-training of loss parameters.
//! * [`adapt`]: online adaptation on segmented tasks.

pub mod adapt;
pub mod arm;
pub mod dataset;
pub mod error;
pub mod loss;
pub mod meta;
pub mod model;
pub mod nn;

pub use error::{Error, Result};
