//! Learned flexible k-opt local search for TSP and CVRP.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gire;
pub mod instance;
pub mod kopt;
pub mod networks;
pub mod neural;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod search;
pub mod solution;
pub mod training;

pub use error::{Error, Result};
