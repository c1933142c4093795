//! RSE-Net: a 2.5D residual squeeze-and-excitation network for left-ventricular
//! myocardium segmentation on LGE-MRI short-axis stacks.
//!
//! The crate is split along the segmentation workflow:
//!
//! - [`data`]: exam directories, slice normalization, 2.5D input stacks, splits.
//! - [`phantom`]: deterministic synthetic exams with analytic ground truth.
//! - [`net`]: the network, its hand-written backward pass and checkpoints.
//! - [`train`]: soft-Dice loss, Adam, the epoch loop and the hyperparameter grid.
//! - [`fuse`]: binarization and pixel-level late fusion of ensemble members.
//! - [`metrics`]: Dice, Hausdorff, area correlation, Bland-Altman, Wilcoxon and
//!   the per-region report.

pub mod data;
pub mod error;
pub mod fuse;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod train;

pub use data::{DatasetSplit, Exam, InputStack, Region, Slice};
pub use error::{Error, Result};
pub use fuse::{EnsembleSpec, FusionStrategy, Mask};
pub use metrics::{RegionReport, SliceMetrics};
pub use net::{ModelParams, NetworkConfig, ProbabilityMap};
pub use phantom::PhantomParams;
pub use train::{GridResult, OptimizerState, TrainConfig, TrainHistory};


