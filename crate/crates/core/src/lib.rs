//! Doubly robust inference for non-probability samples using a reference
//! survey and finite population Bayesian bootstrap synthesis.
//!
//! Start with [`harness::run_simulation`] for Monte Carlo studies or
//! [`harness::run_estimate`] for data files. The algorithm modules are usable
//! on their own.

pub mod error;
pub mod estimators;
pub mod fpbb;
pub mod glmcore;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod popmodel;
pub mod rng;
pub mod samplers;
pub mod smoothers;

pub use error::{Error, Result};
pub use estimators::{CiReference, CombinedEstimate, EstimateRecord, Method};
pub use fpbb::{SynthRow, SyntheticPopulation};
pub use glmcore::QrDesign;
pub use harness::{EstimateConfig, PmDesign, SimConfig};
pub use metrics::{IterationEstimate, MetricsRow};
pub use popmodel::{
    FinitePopulation, NonProbRow, NonProbSample, Outcome, ProbabilitySample, ReferenceRow,
    Scenario,
};
pub use samplers::{BootstrapReplicate, ReplicateRow};
pub use smoothers::{Link, SmootherKind, SmootherSpec};
