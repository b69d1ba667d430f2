//! Hierarchically gated linear RNN with a complex-valued element-wise
//! recurrence and layer-monotone forget-gate lower bounds, together with
//! the desk-scale tooling around it: a minimal reverse-mode tensor core,
//! a three-way-checked scan engine, a training harness, synthetic
//! long-range tasks, and gate/extrapolation instrumentation.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod model;
pub mod scan;
pub mod stats;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{HgrnError, Result};
