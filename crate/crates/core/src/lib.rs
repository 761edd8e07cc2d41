//! Optimal sensor scheduling for continuous-time filtering problems.
//!
//! A sensor schedule is a probability density over the observation window
//! that sets how much measurement effort is spent at each time. The crate
//! simulates scheduled observations, filters them (a grid log-density filter
//! for nonlinear scalar models, the Kalman-Bucy equations for linear-Gaussian
//! ones), computes the gradient of an information utility with respect to the
//! schedule by an adjoint pass, and runs projected gradient ascent.

pub mod adjoint;
pub mod error;
pub mod experiments;
pub mod io;
pub mod kalman_bucy;
pub mod optimizer;
pub mod plot;
pub mod rng;
pub mod schedule;
pub mod sde_sim;
pub mod zakai;

pub use error::{Error, Result};
pub use schedule::{GradientField, SensorSchedule, TimeGrid};
