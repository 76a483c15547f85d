// `!(x > 0.0)` is how validation rejects NaN along with the out-of-range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cli;
pub mod evalmetrics;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod rng;
pub mod service;
pub mod synthcohort;
pub mod timeline;
pub mod training;
