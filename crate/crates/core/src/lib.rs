//! Perception and state estimation for a cone-marked race track.
//!
//! - [`lidar`]: two-stage clustering cone detector
//! - [`slam`]: FastSLAM mapping of cone landmarks
//! - [`localize`]: Monte-Carlo localization on a frozen map, emitting
//!   virtual pose measurements
//! - [`ekf`]: pose/velocity EKF with outlier gating and sensor self-diagnosis
//! - [`sim`]: deterministic track, vehicle and sensor simulation

// `!(x > 0.0)` is the idiom here for rejecting NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ekf;
pub mod error;
pub mod geometry;
pub mod lidar;
pub mod localize;
pub mod rangebearing;
pub mod rng;
pub mod sim;
pub mod slam;
pub mod stats;

pub use error::{Error, Result};
pub use geometry::{Point2, Pose2};
