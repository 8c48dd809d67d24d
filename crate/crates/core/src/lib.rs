//! Contextual policy-gradient hedging overlay.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below fix it to
//! `f64`, which is what the pipeline runs on.

pub mod autodiff;
pub mod baselines;
pub mod checks;
pub mod error;
pub mod features;
pub mod metrics;
pub mod policy;
pub mod scalar;
pub mod simulator;
pub mod synthgen;
pub mod trainer;
pub mod walkforward;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Params = policy::PolicyParams<f64>;
pub type Decision = policy::AllocationDecision<f64>;
pub type Observation = features::ObservationBatch<f64>;
pub type ObservationStack = features::ObservationStack<f64>;
