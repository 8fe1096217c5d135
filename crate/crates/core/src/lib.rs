//! Wasserstein-on-Wasserstein flow matching for point-cloud generation.
//!
//! Point clouds are treated as uniform empirical measures; a generative model
//! transports a distribution over clouds (a metameasure) onto another by
//! learning a permutation-equivariant velocity field with flow matching. The
//! couplings that pair training clouds and their points come from exact,
//! entropic, sliced, or lazy-linear optimal transport.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
mod binio;
pub mod couplings;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod linearized;
pub mod measures;
pub mod net;
pub mod ot;
pub mod seed;
pub mod sliced;

pub use couplings::{CouplingConfig, CouplingKind, OuterPlan, PairedBatch};
pub use data::{CloudDataset, SourceSpec};
pub use error::{Error, Result};
pub use eval::{NnaMetric, NnaReport};
pub use flow::{TrainConfig, Trajectory};
pub use linearized::ReferenceMeasure;
pub use measures::{apply_permutation, interpolate, squared_euclidean_cost, MetaBatch, Permutation, PointCloud};
pub use net::{NetConfig, VelocityNet};
pub use ot::{solve_exact, solve_sinkhorn, wasserstein2, InnerPlan, Solver};
