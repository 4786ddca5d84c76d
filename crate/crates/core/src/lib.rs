#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod acceptance;
pub mod checkpoint;
pub mod cli;
pub mod codebook;
mod codec;
pub mod config;
pub mod engine;
pub mod event;
pub mod oracle;
pub mod pipeline;
pub mod run;
pub mod server;
pub mod serving;
pub mod simulator;
pub mod snapshot;
pub mod study;
pub mod trainer;
