//! Sharp, orthogonally estimated bounds on potential outcomes and treatment
//! effects in networks whose exposure mapping may be misspecified.
//!
//! The crate is organised bottom-up: [`netgraph`] builds networks,
//! [`exposure`] summarizes neighbors' treatments, [`dgp`] simulates data,
//! [`sensitivity`] turns a misspecification model into ratio bounds,
//! [`learners`] fits cross-fitted nuisances and [`estimator`] assembles the
//! bounds. [`oracle`] holds slow brute-force reference computations.

// `!(x >= 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dgp;
pub mod error;
pub mod estimator;
pub mod exposure;
pub mod learners;
pub mod netgraph;
pub mod oracle;
pub mod rng;
pub mod sensitivity;

pub use error::{Error, Result};
