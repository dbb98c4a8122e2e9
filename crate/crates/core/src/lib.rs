pub mod baseline;
pub mod cohort;
pub mod data;
pub mod ddpm;
pub mod error;
pub mod graph;
pub mod io;
pub mod mdan;
pub mod metrics;
pub mod nn;
pub mod partition;
pub mod runner;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
