//! Diverse and admissible multi-agent trajectory forecasting.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: episodes, road masks, prediction sets and their file formats
//! - [`preprocess`]: EM-fitted Kalman smoothing of raw tracks and episode slicing
//! - [`scenemap`]: exact distance transform, the drivable-area prior and scene context
//! - [`diffnet`]: a small reverse-mode differentiation tape with the layers the model needs
//! - [`model`]: attention encoder, scene backbone and the autoregressive affine flow decoder
//! - [`objective`]: symmetric cross-entropy, Adam with plateau halving, training, synthetic data
//! - [`metrics`]: ADE/FDE families, rF, DAO, DAC and the agent-count table

pub mod data;
pub mod diffnet;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod preprocess;
pub mod scenemap;

pub use data::{Episode, Position, PredictionSet, RoadMask, Trajectory};
pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
