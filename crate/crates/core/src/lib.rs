//! Crowdsourced estimate aggregation by predicting each worker from the
//! others, with the averaging, clairvoyant and EM baselines and the
//! simulation metrics used to compare them on a Gaussian factor model.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod linalg;
pub mod policies;
pub mod seeding;

pub use error::{Error, Result};
