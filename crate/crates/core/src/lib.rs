//! Video anomaly detection by fusing a spatiotemporal prediction branch with a
//! prototype memory branch.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod memory;
pub mod model;
pub mod params;
pub mod scoring;
pub mod stlstm;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
