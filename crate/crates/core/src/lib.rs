//! Forecast updating for temporal hierarchies.
//!
//! When part of a period has been observed, the remaining forecasts of every
//! aggregation level can be revised consistently: prune the hierarchy down to
//! the unobserved part, reconcile the reduced system, then restore the
//! observed values.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arma;
pub mod base_models;
pub mod error;
pub mod evaluation;
pub mod hierarchy;
mod optim;
pub mod pruning;
pub mod reconciliation;
pub mod sim;
pub mod updating;

pub use error::{Error, Result};
pub use hierarchy::{AggregationScheme, HierarchyVector, LevelSeries, ObservedPeriod};
pub use pruning::{build_pruned_system, PrunedSystem};
pub use reconciliation::{CovarianceEstimate, ReconMethod, ReconWeights};
