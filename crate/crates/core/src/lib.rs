//! Object-level SLAM back-end that reconstructs static and moving rigid
//! objects as dual quadrics.

// `!(a < b)` is used on purpose so that NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod factors;
pub mod init;
pub mod io;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod plot;
pub mod quadric;
pub mod scenario;
pub mod se3;
pub mod simulator;
pub mod sweep;

pub use error::{Error, Result};
pub use quadric::{BBox, DualConic, DualQuadric, QuadricParams};
pub use se3::{Intrinsics, Pose, Twist};
