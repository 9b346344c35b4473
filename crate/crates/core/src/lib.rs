//! Multi-teacher feature distillation at desk scale.

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod distill;
pub mod encoders;
pub mod error;
pub mod init;
pub mod metrics;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use encoders::{FeatureBundle, FeatureKind, Teacher, TeacherKind, TeacherSpec, ViTConfig};
pub use error::{Error, Result};
pub use metrics::MetricReport;
pub use stats::{RunTable, Summary, TestResult};
pub use tensor::{Graph, ParamStore, Tensor, Var};
pub use trainer::{Checkpoint, TrainConfig};
