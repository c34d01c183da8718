//! Spread-spectrum over-the-air multi-view classification: a Monte Carlo
//! simulator of the transceiver chain, analytic discriminant-gain tools,
//! and breathing-depth optimizers that trade feature dimensions for
//! processing gain under a fixed bandwidth.

pub mod cli;
pub mod config;
pub mod dg;
pub mod error;
pub mod generic;
pub mod gmm;
pub mod harness;
pub mod phy;
pub mod special;
pub mod streams;
pub mod validation;

pub use error::{Error, Result};
