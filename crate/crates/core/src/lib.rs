//! Federated EM for two-class (and general S-class) Gaussian mixtures whose
//! mixing weights differ across sites while the class means are shared.
//!
//! The lead site fits the means by maximizing a density-ratio tilted
//! surrogate of the pooled Q function built from its own data plus
//! first-order summaries sent by the other sites.

pub mod baselines;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod pooled;
pub mod simgen;
pub mod surrogate;

pub use error::{FedMixError, Result};
pub use federation::{CommLedger, Federation, GradientReport, MeanBroadcast, SiteEndpoint};
pub use metrics::{d2_full, d2_unaligned, Estimator};
pub use model::{
    density_ratio, local_q_gradient, mixture_log_likelihood, responsibility, Covariance,
    ModelParams, SiteCovariance, SiteDataset, SiteParams,
};
pub use pooled::{pooled_em_step, run_pooled_em, EmConfig, FitTrace, StopReason, TraceEntry};
pub use surrogate::{
    build_surrogate, federated_init, maximize_surrogate, plug_in_init, run_distributed_em,
    update_lambda,
    RoundInputs, SurrogateQ,
};
