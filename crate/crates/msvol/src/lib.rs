//! Stereo matching-space toolkit: classical matching costs, per-matcher
//! confidence, a multi-feature matching volume with on-disk formats,
//! disparity regression, a small trainable 3-D cost-volume network, and
//! benchmark metrics.

pub mod cli;
pub mod confidence;
pub mod error;
pub mod imagio;
pub mod matchers;
pub mod metrics;
pub mod regress;
pub mod toynet;
pub mod volume;

pub use error::{Error, Result};
