//! Compressed-sensing experimentation toolkit.
//!
//! The pipeline reconstructs a signal x from noisy linear measurements
//! y = Ax + e by minimizing ||Wx||_1 + (mu/2)||x - x0||^2 subject to
//! ||y - Ax|| <= eps, where W is a redundant analysis operator. Three
//! routes to a reconstruction share this objective:
//!
//! * [`solver`] runs the accelerated primal-dual iteration to convergence;
//! * [`continuation`] wraps any inner reconstruction in a warm-start outer
//!   loop that moves the anchor x0 toward the latest estimate;
//! * [`unfolded`] unrolls a fixed number of iterations into a decoder whose
//!   analysis operator W is learned from data by [`trainer`].
//!
//! [`landscape`] perturbs a learned W along random directions to map the
//! loss surface, and [`report`] serializes every artifact deterministically.

pub mod continuation;
pub mod error;
pub mod landscape;
pub mod ops;
pub mod parallel;
pub mod report;
pub mod seed;
pub mod sensing;
pub mod solver;
pub mod trainer;
pub mod unfolded;

pub use error::{CdecError, Result};
