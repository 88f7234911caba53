//! Bird's-eye-view multi-object tracking with multi-lag trajectory costs.

pub mod association;
pub mod branches;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod kalman;
pub mod metrics;
pub mod oracle;
pub mod selftest;
pub mod simulator;

pub use error::{Result, TrackError};
pub use geometry::{BevGrid, BevPoint, CameraModel};
