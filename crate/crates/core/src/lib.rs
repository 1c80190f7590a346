//! Chance-constrained inflow control for hyperbolic supply networks facing
//! Ornstein-Uhlenbeck demand.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod control;
pub mod cost;
pub mod demand;
pub mod error;
pub mod fptd;
pub mod network;
mod linalg;
pub mod normal;
pub mod optimizer;
pub mod quadrature;
pub mod scenario;
pub mod validation;

pub use control::{Channel, ControlGrid};
pub use demand::{MeanLevel, OuProcess, QuantileScale};
pub use error::{Error, Result};
pub use fptd::{Boundary, FptdResult};
