//! Deterministic simulator for wave-based role reallocation in resource-flow
//! systems, with a brute-force oracle, a population CTMC and bulk sweeps.

pub mod cli;
pub mod coordination;
pub mod model;
pub mod oracle;
pub mod parallel;
pub mod protocol;
pub mod scenario_io;
pub mod sim;
pub mod stochastic;
pub mod sweep;
pub mod time;

pub use time::SimTime;
