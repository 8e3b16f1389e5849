//! Configuration loading and subcommand implementations for the `ratstab`
//! binary.

// `!(x > 0.0)` guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
