//! Command-line driver for supsiam experiments: TOML configs, the ablation
//! grid, an on-disk experiment store, post-hoc analysis and SVG plots.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod grid;
pub mod plots;
pub mod runner;
pub mod store;

pub use error::HarnessError;
