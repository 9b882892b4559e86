//! Low-rank decomposition and adaptation for continual learning.
//!
//! The pipeline gathers uncentered second moments of each task's features,
//! splits the low-rank update space into a general subspace (high energy on
//! old and new tasks) and an isolated subspace (high new-to-old energy
//! ratio), trains only the up-projections, and folds the updates back into
//! the backbone weight after a closed-form per-unit rescaling.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod error;
pub mod model;
pub mod numerics;
pub mod recalib;
pub mod runner;
pub mod stats;
pub mod stream;
pub mod subspace;
pub mod trainer;

pub use adapter::{DualLoRALayer, LoRABranch};
pub use error::{LodaError, Result};
pub use model::{CosineClassifier, FeatureExtractor};
pub use recalib::RescaleResult;
pub use runner::{ExperimentConfig, MetricsReport};
pub use stats::{SecondMoment, SecondMomentStore};
pub use stream::{StreamConfig, TaskDataset};
pub use subspace::{SubspaceBases, SubspaceKind};
pub use trainer::TrainConfig;
