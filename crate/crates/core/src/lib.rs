//! Decentralized two-stage distributionally robust optimization.
//!
//! A forecasting step compresses moment (or Wasserstein) information about
//! demand into a two-point distribution; an operations step solves the small
//! two-scenario program that distribution induces. The crate also carries the
//! machinery needed to check how good the induced decision is: truncated
//! linear decision rules, second-order-cone worst-case costs, analytic gap
//! bounds, and the synthetic and data-driven experiment harnesses.
//!
//! Module map:
//!
//! - [`model`]: problem data, ambiguity information, scaling.
//! - [`risk`]: risk measures on finite loss distributions.
//! - [`mechanism`]: two-point forecast construction.
//! - [`conic`]: LP/SOCP kernel (Clarabel backend).
//! - [`lowerlevel`]: the operations team's programs.
//! - [`tldr`]: truncated linear decision rules, worst-case costs and bounds.
//! - [`datadriven`]: sampling, SAA, cross-validation, sign tests.
//! - [`instancegen`]: synthetic families, topologies, sales CSV ingestion.
//! - [`experiment`]: scale sweeps and robustness runs with CSV output.

pub mod conic;
pub mod datadriven;
pub mod error;
pub mod experiment;
pub mod instancegen;
pub mod lowerlevel;
pub mod mechanism;
pub mod model;
pub mod risk;
pub mod tldr;

mod linalg;

pub use error::{Error, Result};
