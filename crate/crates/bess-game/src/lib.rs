//! Stochastic differential game of battery operators on a shared power market.

pub mod asymptotics;
pub mod cli;
pub mod equilibrium;
pub mod error;
pub mod model;
pub mod moments;
pub mod numerics;
pub mod riccati_general;
pub mod riccati_homogeneous;
pub mod scenarios;
pub mod simulate;
pub mod sizing;

pub use error::{Error, Result};
