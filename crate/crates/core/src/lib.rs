//! Semiparametric Bayesian estimation of dynamic discrete choice models.
//!
//! The utility shocks of a finite-state, finite-action dynamic program are
//! modeled as a location-scale mixture of Gumbel distributions with a
//! variable number of components. The Emax function and the conditional
//! choice probabilities then have closed forms in terms of the exponential
//! integral, which makes full posterior simulation tractable: a Hamiltonian
//! Monte Carlo block updates the mixture and utility parameters at a fixed
//! number of components, and a reversible-jump block moves between component
//! counts using a Laplace approximation to the conditional posterior of the
//! new component as the proposal.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`] — E1, incomplete gamma, root finding, HPD intervals.
//! * [`mixture`] — the Gumbel mixture: density, sampling, medians,
//!   truncated means, the scale-normalization factor, and the rho distance.
//! * [`model`] — model specification, the bus-engine and illness-episode
//!   builders, and panel/count data generation.
//! * [`solver`] — closed-form Bellman operator, CCPs, and the
//!   Newton-Kantorovich fixed-point solver.
//! * [`likelihood`] — partial likelihood, parameter transformations,
//!   priors, analytic gradients, and the dynamic-logit MLE.
//! * [`mcmc`] — HMC and reversible-jump kernels, chain orchestration,
//!   draw storage, and convergence diagnostics.
//! * [`postprocess`] — renormalization, posterior summaries, credible sets
//!   for identified sets, and counterfactuals.

pub mod error;
pub mod likelihood;
#[doc(hidden)]
pub mod mc_oracle;
pub mod mcmc;
pub mod mixture;
pub mod model;
pub mod numerics;
pub mod postprocess;
pub mod solver;
#[doc(hidden)]
pub mod testkit;

pub use error::{Error, Result};
