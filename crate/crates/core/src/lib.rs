//! Order-parameter dynamics of two-layer teacher-student committee machines.
//!
//! The crate integrates the closed-form ODEs for the overlaps `(Q, R, T)` of a
//! student network learning from a teacher, finds and classifies families of
//! fixed points, and probes the loss landscape between them.

pub mod ansatz;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod landscape;
pub mod linalg;
pub mod state;

pub use error::{Error, Result};
pub use kernels::ActivationKind;
pub use state::OverlapState;
