//! Tabular laboratory for distillation as entropy-regularized value
//! optimization with budgeted test-time teacher calls. A lossy speculative
//! decoder serves as the comparison arm.

pub mod bench;
pub mod budget;
pub mod cli;
pub mod error;
pub mod mdp;
pub mod model;
pub mod oracle;
pub mod pcl;
pub mod rng;
pub mod specdec;
pub mod tandem;
pub mod training;

pub use error::{Error, Result};
