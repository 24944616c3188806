//! Sparse three-parameter restricted Indian buffet process (S3R-IBP).
//!
//! A doubly sparse, non-negative Poisson matrix factorization
//! `x_nd ~ Poisson(Z_n· B_·d)` where the binary feature matrix `Z` follows a
//! prior that combines the three-parameter IBP weight measure with an
//! arbitrary per-row distribution over the number of active features, and
//! `B` has sparse Gamma entries.
//!
//! Module map:
//!
//! * [`model`] domain types, densities and the RCA transform
//! * [`priors`] forward samplers for the IBP family
//! * [`condbern`] conditional-Bernoulli machinery (ESP tables, inclusion
//!   probabilities, restricted row prior)
//! * [`mcmc`] the Gibbs / Metropolis-Hastings kernel and chain driver
//! * [`eval`] perplexity, coherence, qq checks and feature matching
//! * [`io`] loaders, splits and run configuration

pub mod condbern;
pub mod error;
pub mod eval;
pub mod io;
pub mod mcmc;
pub mod model;
pub mod priors;
pub mod quadrature;
pub(crate) mod random;

pub use error::{Error, Result};
pub use model::{CountMatrix, HyperParams, LatentState, ObservationMask, PosteriorSummary};
