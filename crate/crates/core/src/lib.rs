pub mod dlm;
pub mod grids;
pub mod rng;
pub mod simulate;
pub mod metrics;
pub mod massuni;
pub mod harness;
