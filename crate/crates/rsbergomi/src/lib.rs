//! Monte Carlo pricing and calibration engine for the rBergomi model under a
//! regime-switching fractional Ornstein-Uhlenbeck change of measure.
//!
//! The variance process follows an extended rBergomi dynamic where the
//! mean-reversion level of the driving fractional OU process switches between
//! the states of a continuous-time Markov chain. VIX futures, VIX options and
//! SP500 options are priced by plain Monte Carlo, by a conditionally
//! log-normal approximation, and by an importance-sampled estimator that
//! stratifies over the jump count of the chain.

pub mod calibration;
pub mod cli;
pub mod config;
pub mod ctmc;
pub mod error;
pub mod fou;
pub mod mc;
pub mod model;
pub mod presets;
pub mod pricing_equity;
pub mod pricing_vix;
pub mod specfun;

pub use error::{Error, Result};
