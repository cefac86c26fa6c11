#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod dominance;
pub mod empirical;
pub mod error;
pub mod exact;
pub mod harness;
pub mod mdp;
pub mod models;
pub mod stream;
