//! Empirical Bayes shrinkage for heteroskedastic Gaussian estimates under a
//! conditional location-scale prior.
//!
//! The observation model is `Y_i | theta_i, sigma_i ~ N(theta_i, sigma_i^2)`
//! with known standard errors `sigma_i`. Instead of assuming the latent
//! `theta_i` are independent of `sigma_i`, the CLOSE family models
//! `theta_i | sigma_i` as a location-scale family with conditional mean
//! `m0(sigma)` and conditional standard deviation `s0(sigma)`:
//!
//! ```text
//! theta_i = m0(sigma_i) + s0(sigma_i) * tau_i,   tau_i | sigma_i ~ G0
//! ```
//!
//! The pipeline is
//!
//! 1. estimate `(m0, s0)` by local linear regression of `Y` (and then of
//!    squared residuals) on `log10(sigma)` ([`nuisance`]),
//! 2. transform to `Z_i = (Y_i - m(sigma_i)) / s(sigma_i)`,
//!    `nu_i = sigma_i / s(sigma_i)` and fit the mixing distribution of `tau`
//!    by nonparametric maximum likelihood on a fixed grid ([`npmle`]), and
//! 3. form posterior summaries and plug-in decision rules
//!    ([`methods`], [`decisions`]).
//!
//! [`validation`] scores competing methods out of sample with the coupled
//! bootstrap, and [`simulation`] provides synthetic data-generating processes
//! with oracle posterior baselines for Monte Carlo risk evaluation.

pub mod data;
pub mod decisions;
pub mod error;
pub mod methods;
pub mod npmle;
pub mod nuisance;
pub mod numeric;
pub mod posterior;
pub mod prior;
pub mod rng;
pub mod simulation;
pub mod validation;

pub use data::{Dataset, Observation};
pub use error::Error;
pub use methods::{FitOptions, FittedModel, MethodTag};
pub use npmle::{GridSpec, NpmleFit, SolverOptions};
pub use nuisance::NuisanceFit;
pub use posterior::{PosteriorSummary, TransformedUnit};
pub use prior::DiscretePrior;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
