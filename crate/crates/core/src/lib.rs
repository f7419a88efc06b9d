//! Maximum-expected-value estimators based on two-sample testing, their
//! analytic moments for two Gaussians, simulation studies, and tabular and
//! deep Q-learning variants that use them as targets.

pub mod analytic;
pub mod deep;
pub mod env;
pub mod error;
pub mod estimators;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod tabular;

pub use error::{MevError, Result};
pub use estimators::{
    average_estimator, double_estimator, k_estimator, max_estimator, summarize, t_estimator,
    weighted_estimator, DeMode, Kernel, KernelSpec, MevEstimate, SampleSummary,
};
pub use rng::{stream_rng, SimRng};
