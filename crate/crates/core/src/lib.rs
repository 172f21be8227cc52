//! Generalized linear contextual bandits with doubly-robust Thompson sampling.
//!
//! The crate is organised bottom-up:
//!
//! - [`glm`]: mean functions, context sets, Gram matrices and the ridge GLM solver.
//! - [`estimators`]: interaction history, pseudo-rewards and the bounded-MLE,
//!   imputation and doubly-robust estimators.
//! - [`policies`]: DDRTS-GLM and the GLM-UCB / TS(GLM) / uniform baselines.
//! - [`environments`]: the synthetic correlated-context environment, context
//!   diagnostics and offline replay.
//! - [`harness`]: seeded runs, grid search, aggregation and artifacts.

// `!(x > 0.0)` is the NaN-rejecting form used throughout input validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod environments;
pub mod error;
pub mod estimators;
pub mod glm;
pub mod harness;
pub mod policies;

pub use error::{Error, Result};
pub use glm::{ContextSet, MeanFunction};
pub use policies::{Decision, Policy, PolicySpec};
