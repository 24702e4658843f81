//! Distributed estimation of Gaussian-process parameters on large spatial
//! domains by multi-resolution recursive integration.
//!
//! The domain is partitioned recursively ([`domain`]). Full likelihoods are
//! maximized on the small leaf sets ([`likelihood`]); the resulting estimating
//! functions are combined level by level into a single estimate with its
//! Godambe information ([`integration`]), either directly or through the
//! staged executor in [`runtime`].

pub mod domain;
pub mod error;
pub mod inference;
pub mod integration;
pub mod likelihood;
pub mod linalg;
pub mod model;
mod optim;
pub mod runtime;
pub mod simulator;

pub use domain::{build_partition, Location, NodePath, PartitionStrategy, PartitionTree, SpatialDomain};
pub use error::{Error, Result, Stage};
pub use integration::{recursive_integrate, sequential_integrate, IntegrateOptions, MetaEstimate, Method};
pub use likelihood::{DataBlock, DataSource, Dataset, FitOptions, ScoreMatrix};
pub use model::{CovKind, MeanKind, ModelSpec, TauStructure, ThetaParams};
