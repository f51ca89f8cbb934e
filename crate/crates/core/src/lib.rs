// `!(x >= 0.0)` style checks are used on purpose to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod network;
pub mod norm;
pub mod rng;
pub mod tensor;
