//! Matching engine linking policy engagement opportunities to researchers
//! and institutions through embedding similarity.

// `!(x >= 0.0)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod calibration;
pub mod embedding;
pub mod http;
pub mod matching;
pub mod model;
pub mod opportunity;
pub mod scholar;
pub mod text;
pub mod vindex;
