//! Transformer forecasting for multivariate time series with an optional
//! knowledge-graph embedding of inter-channel relations.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod graph;
pub mod io;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
