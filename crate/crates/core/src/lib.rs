pub mod bilevel;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod nets;
pub mod objective;
pub mod optim;
pub mod params;
pub mod pseudo;
pub mod reweight;
pub mod scam;
pub mod synthdata;
pub mod trainer;
pub mod vfm;

pub use error::{Error, Result};
