//! Pose-aligned person re-identification.
//!
//! PoseBoxes warp detected body parts onto a fixed upright template; a
//! three-stream fusion network over the original image, the PoseBox and the
//! pose confidences learns a pose invariant embedding (PIE); retrieval is
//! scored with CMC and mAP under a cross-camera protocol, optionally through
//! a KISSME Mahalanobis metric.

pub mod error;
pub mod eval;
pub mod io;
pub mod metric;
pub mod net;
pub mod pipeline;
pub mod posebox;
pub mod report;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
