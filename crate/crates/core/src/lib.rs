//! Continuous-time latent exponential model of peer effects in irreversible
//! adoption decisions.
//!
//! Individuals on a network adopt in an exponential race whose rates jump
//! when neighbors adopt. Only the adoption indicators at a single horizon
//! are observed; the latent order is marginalized in closed form. The crate
//! provides exact simulation, the permutation likelihood with analytical
//! score and Hessian, maximum-likelihood estimation, counterfactual
//! estimands, linear baselines, and a replication harness.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod data;
pub mod divdiff;
pub mod error;
pub mod estimands;
pub mod estimator;
pub mod harness;
pub mod io;
pub mod likelihood;
pub mod net;
pub mod process;
pub mod rates;
pub mod streams;

pub use data::{ComponentData, Covariates, Sample};
pub use divdiff::Derivatives;
pub use error::{Error, Result};
pub use estimator::{fit, FitOptions, FitResult};
pub use likelihood::{total_loglik, LikelihoodEval, LikelihoodOptions};
pub use net::Network;
pub use process::{simulate, Trajectory};
pub use rates::{LogLinearRate, RateContext, RateModel, Theta};
