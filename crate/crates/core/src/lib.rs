//! Voxel-wise statistical anomaly detection for multi-channel 3D volumes.
//!
//! The crate fits three unsupervised models on healthy training studies and
//! scores new studies voxel by voxel:
//!
//! * [`baseline`]: per-voxel, per-channel z-scores; the score is the channel norm.
//! * [`covariance`]: a full channel covariance per voxel; the score is the squared
//!   Mahalanobis distance.
//! * [`projection`]: an orthonormal basis of the span of the training z-maps; the
//!   score is the per-voxel norm of the projection residual.
//!
//! Evaluation ([`metrics`], [`stats`]) covers voxel- and sample-level AP/AUC,
//! paired bootstrap, Wilcoxon signed-rank tests and Bonferroni correction.
//! [`phantom`] generates seeded synthetic cohorts with ground-truth lesions and
//! [`pipeline`] runs the whole protocol end to end.

pub mod baseline;
pub mod covariance;
pub mod error;
pub mod metrics;
pub mod model_file;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod projection;
pub mod reduce;
pub mod source;
pub mod stats;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{BinaryMask, Dims, Grid, HeadMask, MultiChannelVolume, ScoreMap};
