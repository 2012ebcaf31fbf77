//! Sample reweighting driven by a lookahead sample-affinity test, with ERM,
//! Just-Train-Twice and loss-rank baselines, small differentiable models, a
//! synthetic group-biased data generator and an experiment harness.
//!
//! Training code never sees group labels; they are used for evaluation
//! only.

pub mod affinity;
pub mod baselines;
pub mod datagen;
pub mod diffmodel;
pub mod error;
pub mod exec;
pub mod harness;
pub mod oracle;
pub mod selftest;

pub use affinity::{AffinityConfig, SampleAffinityReport, WeightScale};
pub use baselines::{ErrorSet, JttConfig};
pub use datagen::{BiasSpec, GroupedDataset};
pub use diffmodel::{Example, Model, ModelSpec, ParamVector};
pub use error::{Error, Result};
pub use exec::Execution;
