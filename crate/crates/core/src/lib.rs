//! Covariance-based selection of homogeneous partitions.

pub mod covtest;
pub mod data;
pub mod diagnostic;
pub mod error;
pub mod eval;
pub mod gram;
pub mod pipeline;
pub mod rng;
pub mod quasiclique;
pub mod simgen;
pub mod stepdown;

pub use covtest::{pair_test, MultiplierSet, PairTest, StatKind, TestStatistic};
pub use data::{load_dataset, Partition, PartitionedDataset, SampleMatrix};
pub use error::{Error, Result};
pub use stepdown::{stepdown, HypothesisList, StepdownConfig, StepdownResult};
