//! Numerical laboratory for graph-convolution dynamics.
//!
//! The crate studies the linear and ReLU dynamics X ↦ φ(ÃXW) on small
//! graphs: invariant eigen-subspaces and their relative amplification,
//! Dirichlet-energy over-smoothing, rank collapse, and sum-of-Kronecker-
//! products (SKP) message passing that provably amplifies independent
//! per-column signals. Everything is deterministic given explicit seeds.
//!
//! Module map:
//! - [`matrix`]: dense row-major matrices and the text format.
//! - [`rng`]: the one seeded generator used everywhere.
//! - [`linalg`]: Jacobi eigensolver, SVD, Kronecker products, vectorization.
//! - [`graph`]: graphs, ER generation, components, aggregations, Laplacians.
//! - [`dynamics`]: layer propagation, trajectory metrics, decay-rate and
//!   rank-collapse probes.
//! - [`skp`]: SKP operators and the amplifying construction.
//! - [`training`]: encoder/message-passing/decoder stack with manual
//!   backprop, Adam, plateau stopping.
//! - [`experiments`]: verification suite, deep-rollout study, synthetic
//!   depth-scaling study; consumed by the CLI crate.

pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod linalg;
pub mod matrix;
pub mod rng;
pub mod skp;
pub mod training;

pub use dynamics::{Activation, LayerSpec, MetricContext, Trajectory};
pub use error::{Error, Result};
pub use experiments::{ExperimentReport, Figure1Config, SyntheticConfig, VerifyReport};
pub use graph::{AggregationKind, Edge, Graph, LaplacianKind};
pub use linalg::{SpectralDecomposition, SvdResult};
pub use matrix::DenseMatrix;
pub use rng::Rng;
pub use skp::SkpOperator;
pub use training::{AdamState, ModelFamily, ModelParams, TrainConfig, TrainStatus};
