//! Ordinal versus cardinal preference fine-tuning on finite prompt/response
//! spaces.

pub mod annotator;
pub mod data_io;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod impossibility;
pub mod model;
pub mod numeric;
pub mod policy_opt;
pub mod reward_fit;

pub use error::{Error, Result};
pub use dataset::{CardinalDataset, CardinalRecord, Comparison, DatasetRef, OrdinalDataset, OrdinalRecord, ScaleTag, Side};
pub use model::{FeasibleSet, MixtureFamily, Policy, RewardTable, Shape, Table};
pub use policy_opt::{LossKind, LossSpec, OptimizerConfig};
pub use reward_fit::FittedReward;
