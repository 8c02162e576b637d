//! End-to-end training and evaluation: data loading and normalization,
//! run configuration, the optimization loop, checkpointing, and held-out
//! prediction. Everything below `train`/`evaluate` is deterministic in the
//! configured seed.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod predict;
pub mod train;
