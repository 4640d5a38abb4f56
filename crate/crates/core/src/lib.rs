//! Co-state data fusion for powered descent: a regularized algebraic co-state
//! computed from sensor increments, online regime discovery, a learned
//! continuous-time Markov generator over regimes, Bayesian mode correction,
//! and an EKF baseline, exercised by a lunar descent simulator.

pub mod alarm;
pub mod bayes;
pub mod costate;
pub mod ekf;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod measurement;
pub mod mpc;
pub mod pipeline;
pub mod regimes;
pub mod sim;

pub use error::{Error, Result};
