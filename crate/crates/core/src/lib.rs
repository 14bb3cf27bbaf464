//! Channel and layer pruning for small residual CNNs: a CPU tensor engine,
//! a ResNet model graph with structural surgery, importance criteria, the
//! pruning pipeline and exact complexity metrics.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod criteria;
pub mod data;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pruner;
pub mod report;
pub mod svd;
pub mod tensor;
pub mod train;

pub use criteria::{CalibrationSpec, Criterion, ImportanceTable};
pub use error::{Error, Result};
pub use model::{build_model, ArchitectureConfig, BlockId, ModelGraph};
pub use pruner::{ChannelSchedule, HybridConfig, PhaseOrder, PlanLog};
pub use tensor::Tensor;
