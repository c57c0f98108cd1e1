//! Super-hedging prices for stochastic target games under model uncertainty.
//!
//! The crate solves the concave HJB equation of the game on a grid
//! ([`hjb`]), builds smooth certified supersolutions from shaken coefficients
//! ([`regularize`]), turns surfaces into feedback hedges and stress-tests
//! them by simulation ([`game`]), and cross-checks prices with a regression
//! Monte Carlo solver of the dual FBSDE ([`dual`]).

pub mod model;
pub mod hjb;
pub mod regularize;
pub mod game;
pub mod dual;
