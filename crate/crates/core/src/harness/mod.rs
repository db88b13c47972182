//! Synthetic data, metrics, file formats, complexity counting and
//! benchmarks.

pub mod bench;
pub mod checks;
pub mod flops;
pub mod io;
pub mod metrics;
pub mod scene;
