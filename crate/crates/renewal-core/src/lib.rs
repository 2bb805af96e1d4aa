//! Renewal premium optimisation for non-life insurance portfolios.
//!
//! Given a portfolio of policyholders with known premiums and premium-change
//! elasticities, this crate computes per-policy premium-change fractions that
//! optimise an insurer objective (expected renewed premium volume, its
//! variance, expected premium difference, or the retention level itself)
//! subject to a retention floor and box/grid constraints on the changes.
//!
//! The crate is organised around the pipeline:
//!
//! * [`portfolio`] — policy data model, CSV ingestion, synthetic generation,
//!   premium-band splitting.
//! * [`models`] — the three renewal-probability families (polynomial, logit,
//!   discrete table) with analytic derivatives.
//! * [`objectives`] — objective and constraint evaluation, floor rounding,
//!   and a Monte Carlo oracle for the random renewed volume.
//! * [`qp`] — the diagonal quadratic program for the linear-elasticity case,
//!   with KKT certification and an active-set cross-check.
//! * [`sqp`] — sequential quadratic programming for the smooth nonconvex
//!   cases (quadratic elasticity, logit, retention maximisation).
//! * [`mdnlp`] — mixed-discrete optimisation over a grid of admissible
//!   changes: continuous relaxation, rounding, linearised subproblems solved
//!   by branch and bound, and an exhaustive oracle for small portfolios.
//! * [`sim`] — simulation search: sample changes from a prior, resample until
//!   feasible, keep the best of `m` replications.
//! * [`tariff`] — recovery of market-tariff coefficients from optimised
//!   premiums by derivative-free least squares.
//! * [`scenario`] — scenario runner producing the report tables consumed by
//!   the CLI.
//!
//! All evaluation is deterministic: random streams are keyed by explicit
//! seeds and parallel reductions use a fixed chunked order, so results are
//! identical with and without the `parallel` feature.

pub mod error;
mod exec;
pub mod mdnlp;
pub mod models;
pub mod objectives;
pub mod portfolio;
pub mod qp;
pub mod rng;
pub mod scenario;
pub mod sim;
pub mod sqp;
pub mod tariff;

pub use error::{Error, Result};
pub use objectives::{Constraints, DeltaVector, DiscreteGrid, RoundingConfig, VarianceMode};
pub use portfolio::{Calibration, Policy, Portfolio, PremiumSplit};
pub use qp::KktCertificate;
