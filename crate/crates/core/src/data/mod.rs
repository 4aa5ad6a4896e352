//! File formats, datasets and the synthetic benchmark.

pub mod checkpoint;
pub mod config;
pub mod csv;
pub mod dataset;
pub mod pnm;
pub mod synth;
