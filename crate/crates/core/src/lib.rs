//! Streaming semiparametric regression for horizontally distributed data.
//!
//! The engine fits Bayesian Gaussian linear mixed models (penalized splines,
//! optional random intercepts) by mean field variational Bayes. All fitting is
//! driven by additive summary statistics (CᵀC, Cᵀy, yᵀy, n), which makes exact
//! distributed batch aggregation, real-time stream combining, sliding-window
//! forgetting and learning-rate reweighting possible without ever moving raw
//! rows to a central location.

pub mod config;
pub mod mapreduce;
pub mod mfvb;
pub mod model;
pub mod par;
pub mod runtime;
pub mod secure;
pub mod spline;
pub mod suffstats;
pub mod synthdata;

pub use mfvb::{FitConfig, Posterior, QState};
pub use model::{BlockLayout, BlockSpec, FixedTerm, ModelSpec, PriorHyperparams};
pub use suffstats::{DecayConfig, SufficientStats};
