//! Robustness certificates for data-driven state-feedback controllers whose
//! training data are randomly perturbed.
//!
//! The crate computes the finite-difference sensitivity of a data-driven
//! design map, closed-form lower and upper bounds on the probability that the
//! perturbed closed loop is unstable, and Monte Carlo estimates of the same
//! probability.

pub mod bounds;
pub mod ctrlmaps;
pub mod experiment;
pub mod linalg;
pub mod lti;
pub mod mc;
pub mod sensitivity;
