//! Leader-follower collaborative aerial segmentation.
//!
//! A high-altitude leader segments a coarse view of the scene with a small
//! vision transformer, ranks the four quadrants of its view by attention,
//! and sends the top ones to low-altitude followers. Followers segment
//! their quadrant at full resolution with a CNN and send the result back,
//! where it is fused into the leader's upsampled prediction. Followers can
//! share batch-norm statistics with each other to adapt to weather shifts.

pub mod backends;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod numerics;
pub mod protocol;
pub mod scenario;
pub mod seed;
pub mod selection;
pub mod tta;
pub mod world;

pub use error::{Error, Result};
