//! Low-level dataset distillation for medical image enhancement.

pub mod autodiff;
pub mod coreset;
pub mod degrade;
pub mod distill;
pub mod error;
pub mod evalharness;
pub mod nets;
pub mod optim;
pub mod phantom;
pub mod resample;
pub mod rng;
pub mod spg;
pub mod tds;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use autodiff::{grad, no_grad, Var};
pub use coreset::{CoresetMethod, SelectionBudget, SliceRef};
pub use degrade::{Degradation, DegradationSpec};
pub use distill::{DistillConfig, LossTrace, MatchingMode};
pub use error::{Error, Result};
pub use evalharness::{ExperimentConfig, ExperimentReport, MetricPair, TrainConfig};
pub use nets::{Arch, NetworkSpec, ParamSet};
pub use phantom::{CohortSpec, PatientVolume};
pub use spg::{DistilledState, SpgConfig};
pub use tds::TdsContainer;
pub use tensor::{DType, Element, Tensor};
